"""Toy-scale dual-adapter video-language model.

Layout: a frozen vision encoder turns frame features into pooled video
tokens; one trainable projector per task group maps them into the language
embedding space; the projected tokens are prepended to the embedded prompt
and run through a frozen decoder-only transformer whose attention
projections carry one low-rank adapter pair per task group.
"""

from __future__ import annotations

import io
import logging
import math
import re
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .schema import TaskGroup, VideoSample

log = logging.getLogger(__name__)

GROUPS = (TaskGroup.LC, TaskGroup.PC)
ATTN_PROJECTIONS = ("q", "k", "v", "o")


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# tokenizer
# --------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"[a-z]+|\d|[^\sa-z\d]")
_CLOSE_PUNCT = {".", ",", "?", "!", ";", ":"}

PAD, BOS, SEP, EOS, UNK = "<pad>", "<bos>", "<sep>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, SEP, EOS, UNK)


def split_words(text: str) -> list[str]:
    """Lower-cased word/punctuation tokens; digits are single tokens."""
    return _TOKEN_RE.findall(text.lower())


class Tokenizer:
    """Word-level tokenizer over a closed vocabulary plus digits."""

    def __init__(self, vocab: Sequence[str]):
        vocab = list(vocab)
        if tuple(vocab[: len(SPECIALS)]) != SPECIALS:
            raise ConfigError("vocabulary must start with the special tokens")
        if len(set(vocab)) != len(vocab):
            raise ConfigError("duplicate vocabulary entries")
        self.vocab = vocab
        self.index = {w: i for i, w in enumerate(vocab)}
        self.pad_id, self.bos_id, self.sep_id, self.eos_id, self.unk_id = range(len(SPECIALS))

    @classmethod
    def from_corpus(cls, texts: Sequence[str]) -> "Tokenizer":
        words = {w for t in texts for w in split_words(t)}
        words |= set("0123456789") | {".", ",", "?", "s"}
        return cls(list(SPECIALS) + sorted(words))

    def __len__(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, self.unk_id) for w in split_words(text)]

    def decode(self, ids: Sequence[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == self.eos_id:
                break
            if i in (self.pad_id, self.bos_id, self.sep_id):
                continue
            words.append(self.vocab[i] if 0 <= i < len(self.vocab) else UNK)
        return detokenize(words)


def detokenize(words: Sequence[str]) -> str:
    out = ""
    capitalize = True
    seen: list[str] = []
    for w in words:
        prev = seen[-1] if seen else ""
        decimal = prev == "." and len(seen) > 1 and seen[-2].isdigit()
        glue = (
            not out
            or w in _CLOSE_PUNCT
            or (w.isdigit() and (prev.isdigit() or decimal))
            or (w == "s" and prev.isdigit())
        )
        token = w.capitalize() if capitalize and w.isalpha() else w
        out += token if glue else " " + token
        if w.isalpha():
            capitalize = False
        elif w in {".", "?", "!"} and not prev.isdigit():
            capitalize = True
        seen.append(w)
    return out


def default_tokenizer() -> Tokenizer:
    from .datasetkit import template_corpus

    return Tokenizer.from_corpus(template_corpus())


# --------------------------------------------------------------------------
# config
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BackboneConfig:
    raw_dim: int = 16
    d_v: int = 32
    d_l: int = 64
    layers: int = 4
    heads: int = 4
    vocab_size: int = 0
    max_seq_len: int = 128
    rank: int = 16
    adapted: tuple[str, ...] = ATTN_PROJECTIONS
    pool_stride: int = 5
    mlp_ratio: int = 4
    embed_std: float = 0.5
    lora_dropout: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "adapted", tuple(self.adapted))
        positive = ("raw_dim", "d_v", "d_l", "layers", "heads", "vocab_size", "max_seq_len", "pool_stride", "mlp_ratio")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_l % self.heads:
            raise ConfigError(f"d_l={self.d_l} not divisible by heads={self.heads}")
        if not 1 <= self.rank <= self.d_l // 4:
            raise ConfigError(f"rank must be in [1, d_l/4={self.d_l // 4}], got {self.rank}")
        bad = set(self.adapted) - set(ATTN_PROJECTIONS) - {"fc1", "fc2"}
        if bad or not self.adapted:
            raise ConfigError(f"invalid adapted layer names {sorted(bad) or self.adapted}")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["adapted"] = list(self.adapted)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "BackboneConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------


class LoRALinear(nn.Module):
    """Frozen affine map plus one low-rank update per task group.

    With ``group=None`` this is the frozen layer; otherwise the effective
    weight is ``W + B[group] @ A[group]``.
    """

    def __init__(self, d_in: int, d_out: int, rank: int, dropout: float = 0.0):
        super().__init__()
        self.base = nn.Linear(d_in, d_out)
        self.base.requires_grad_(False)
        self.rank = rank
        self.dropout = dropout
        self.lora_A = nn.ParameterDict({g.value: nn.Parameter(torch.zeros(rank, d_in)) for g in GROUPS})
        self.lora_B = nn.ParameterDict({g.value: nn.Parameter(torch.zeros(d_out, rank)) for g in GROUPS})

    def forward(self, x: torch.Tensor, group: TaskGroup | None = None) -> torch.Tensor:
        y = self.base(x)
        if group is None:
            return y
        g = TaskGroup(group).value
        if self.training and self.dropout > 0:
            x = F.dropout(x, self.dropout)
        return y + (x @ self.lora_A[g].t()) @ self.lora_B[g].t()

    def delta(self, group: TaskGroup) -> torch.Tensor:
        g = TaskGroup(group).value
        return self.lora_B[g] @ self.lora_A[g]

    def effective_weight(self, group: TaskGroup | None) -> torch.Tensor:
        if group is None:
            return self.base.weight
        return self.base.weight + self.delta(group)


class Linear(nn.Linear):
    """Frozen linear that ignores the group argument."""

    def forward(self, x: torch.Tensor, group: TaskGroup | None = None) -> torch.Tensor:  # noqa: ARG002
        return super().forward(x)


def _maybe_lora(name: str, d_in: int, d_out: int, cfg: BackboneConfig) -> nn.Module:
    if name in cfg.adapted:
        return LoRALinear(d_in, d_out, cfg.rank, cfg.lora_dropout)
    layer = Linear(d_in, d_out)
    layer.requires_grad_(False)
    return layer


class Block(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        d = cfg.d_l
        self.heads = cfg.heads
        self.ln1 = nn.LayerNorm(d)
        self.q = _maybe_lora("q", d, d, cfg)
        self.k = _maybe_lora("k", d, d, cfg)
        self.v = _maybe_lora("v", d, d, cfg)
        self.o = _maybe_lora("o", d, d, cfg)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = _maybe_lora("fc1", d, cfg.mlp_ratio * d, cfg)
        self.fc2 = _maybe_lora("fc2", cfg.mlp_ratio * d, d, cfg)

    def forward(self, x: torch.Tensor, mask: torch.Tensor, group: TaskGroup | None) -> torch.Tensor:
        b, s, d = x.shape
        h = self.ln1(x)
        hd = d // self.heads

        def heads(t: torch.Tensor) -> torch.Tensor:
            return t.view(b, s, self.heads, hd).transpose(1, 2)

        q, k, v = heads(self.q(h, group)), heads(self.k(h, group)), heads(self.v(h, group))
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        att = att.masked_fill(~mask[:, None], float("-inf")).softmax(-1)
        y = (att @ v).transpose(1, 2).reshape(b, s, d)
        x = x + self.o(y, group)
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x), group)), group)


def sinusoidal_positions(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    inv = torch.exp(-math.log(10000.0) * torch.arange(0, d, 2, dtype=torch.float64) / d)
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * inv)
    pe[:, 1::2] = torch.cos(pos * inv)
    return pe.float()


class VisionEncoder(nn.Module):
    """Frozen per-frame feature map followed by fixed-stride mean pooling."""

    def __init__(self, raw_dim: int, d_v: int, stride: int):
        super().__init__()
        self.stride = stride
        self.proj = nn.Linear(raw_dim, d_v)
        self.requires_grad_(False)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        h = F.gelu(self.proj(frames))
        n, d = h.shape
        n_tok = -(-n // self.stride)
        pad = n_tok * self.stride - n
        if pad:
            h = torch.cat([h, h.new_zeros(pad, d)])
        counts = torch.full((n_tok, 1), float(self.stride), dtype=h.dtype)
        counts[-1, 0] = self.stride - pad
        return h.view(n_tok, self.stride, d).sum(1) / counts


# --------------------------------------------------------------------------
# the model
# --------------------------------------------------------------------------


@dataclass
class Generation:
    text: str
    ids: list[int]
    truncated: bool


@dataclass
class Example:
    """One tokenized query: video tokens, prompt ids and (for training) answer ids."""

    video: torch.Tensor
    prompt: list[int]
    answer: list[int] = field(default_factory=list)


class CrashChatModel(nn.Module):
    def __init__(self, cfg: BackboneConfig, tokenizer: Tokenizer):
        super().__init__()
        if cfg.vocab_size != len(tokenizer):
            raise ConfigError(f"vocab_size {cfg.vocab_size} != tokenizer size {len(tokenizer)}")
        self.cfg = cfg
        self.tokenizer = tokenizer
        gen = torch.Generator().manual_seed(cfg.seed)
        self.encoder = VisionEncoder(cfg.raw_dim, cfg.d_v, cfg.pool_stride)
        self.projectors = nn.ModuleDict({g.value: nn.Linear(cfg.d_v, cfg.d_l) for g in GROUPS})
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_l)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(cfg.d_l)
        self.register_buffer("positions", sinusoidal_positions(cfg.max_seq_len, cfg.d_l), persistent=False)
        self._init_weights(gen)
        for name, p in self.named_parameters():
            p.requires_grad_(is_adapter_param(name))
        self.invocations: Counter[str] = Counter()

    @torch.no_grad()
    def _init_weights(self, gen: torch.Generator) -> None:
        def normal_(t: torch.Tensor, std: float) -> None:
            t.copy_(torch.randn(t.shape, generator=gen) * std)

        d = self.cfg.d_l
        normal_(self.encoder.proj.weight, 1.0 / math.sqrt(self.cfg.raw_dim))
        normal_(self.encoder.proj.bias, 0.1)
        normal_(self.embed.weight, self.cfg.embed_std)
        for blk in self.blocks:
            for name in ("q", "k", "v", "o", "fc1", "fc2"):
                layer = getattr(blk, name)
                lin = layer.base if isinstance(layer, LoRALinear) else layer
                normal_(lin.weight, 1.0 / math.sqrt(lin.in_features))
                lin.bias.zero_()
                if isinstance(layer, LoRALinear):
                    for g in GROUPS:
                        normal_(layer.lora_A[g.value], 1.0 / math.sqrt(lin.in_features))
                        layer.lora_B[g.value].zero_()
        # one draw shared by both projectors
        w = torch.randn(d, self.cfg.d_v, generator=gen) / math.sqrt(self.cfg.d_v)
        for g in GROUPS:
            self.projectors[g.value].weight.copy_(w)
            self.projectors[g.value].bias.zero_()

    # --- encoding ---------------------------------------------------------

    @torch.no_grad()
    def encode_video(self, video: VideoSample | np.ndarray) -> torch.Tensor:
        frames = video.frames if isinstance(video, VideoSample) else np.asarray(video)
        if frames.ndim != 2 or frames.shape[0] == 0:
            raise ValueError("video must have at least one frame")
        if frames.shape[1] != self.cfg.raw_dim:
            raise ConfigError(f"frame feature dim {frames.shape[1]} != encoder raw_dim {self.cfg.raw_dim}")
        dtype = self.embed.weight.dtype
        return self.encoder(torch.tensor(np.asarray(frames), dtype=dtype))

    def project(self, video_tokens: torch.Tensor, group: TaskGroup) -> torch.Tensor:
        try:
            proj = self.projectors[TaskGroup(group).value]
        except ValueError:
            raise ValueError(f"unknown task group {group!r}") from None
        return proj(video_tokens)

    def embed_text(self, ids: Sequence[int]) -> torch.Tensor:
        return self.embed(torch.as_tensor(list(ids), dtype=torch.long))

    def assemble(self, video_emb: torch.Tensor, text_emb: torch.Tensor) -> torch.Tensor:
        """Concatenate projected video tokens before text tokens.

        Over-long inputs lose video tokens from the front; text is never cut.
        """
        if video_emb.shape[-1] != text_emb.shape[-1]:
            raise ValueError("video and text embeddings must share the language dimension")
        n_v, n_t = video_emb.shape[0], text_emb.shape[0]
        limit = self.cfg.max_seq_len
        if n_t > limit:
            raise ValueError(f"text of {n_t} tokens exceeds max_seq_len={limit}")
        if n_v + n_t > limit:
            keep = limit - n_t
            warnings.warn(f"sequence of {n_v + n_t} tokens truncated to {limit}: dropping {n_v - keep} video tokens",
                          stacklevel=2)
            video_emb = video_emb[n_v - keep:]
        return torch.cat([video_emb, text_emb], dim=0)

    # --- transformer ------------------------------------------------------

    def forward_adapted(
        self,
        z: torch.Tensor,
        group: TaskGroup | None,
        lengths: Sequence[int] | None = None,
    ) -> torch.Tensor:
        """Next-token logits for a batch of assembled sequences.

        ``z`` is ``(batch, seq, d_l)`` or ``(seq, d_l)``, left-padded; ``lengths``
        holds the real length of each row. ``group=None`` runs the frozen model.
        """
        squeeze = z.dim() == 2
        if squeeze:
            z = z[None]
        b, s, _ = z.shape
        if s > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {s} exceeds max_seq_len={self.cfg.max_seq_len}")
        if lengths is None:
            lengths = [s] * b
        lens = torch.as_tensor(list(lengths))
        start = s - lens
        idx = torch.arange(s)
        real = idx[None, :] >= start[:, None]
        pos = (idx[None, :] - start[:, None]).clamp(min=0)
        causal = idx[None, :] <= idx[:, None]
        mask = causal[None] & real[:, None, :]
        mask = mask | torch.eye(s, dtype=torch.bool)[None]
        x = z + self.positions[pos].to(z.dtype) * real[..., None]
        for blk in self.blocks:
            x = blk(x, mask, group)
        logits = self.ln_f(x) @ self.embed.weight.t()
        return logits[0] if squeeze else logits

    # --- batching ---------------------------------------------------------

    def batch_inputs(
        self, examples: Sequence[Example], group: TaskGroup | None, with_answers: bool = False
    ) -> tuple[torch.Tensor, list[int], list[int]]:
        """Project, embed, assemble and left-pad a batch.

        Returns ``(z, lengths, prompt_ends)`` where ``prompt_ends[i]`` is the
        row length before any answer tokens.
        """
        proj_group = TaskGroup.LC if group is None else group
        seqs, prompt_lens = [], []
        for ex in examples:
            ids = ex.prompt + (ex.answer if with_answers else [])
            seq = self.assemble(self.project(ex.video, proj_group), self.embed_text(ids))
            seqs.append(seq)
            prompt_lens.append(seq.shape[0] - (len(ex.answer) if with_answers else 0))
        s = max(q.shape[0] for q in seqs)
        z = torch.stack([F.pad(q, (0, 0, s - q.shape[0], 0)) for q in seqs])
        return z, [q.shape[0] for q in seqs], prompt_lens

    def answer_nll(self, examples: Sequence[Example], group: TaskGroup | None) -> torch.Tensor:
        """Per-example summed NLL of the answer tokens and their count, shape ``(batch, 2)``.

        Prompt and video positions are masked out of the loss.
        """
        z, lengths, prompt_lens = self.batch_inputs(examples, group, with_answers=True)
        logits = self.forward_adapted(z, group, lengths)
        s = z.shape[1]
        logp = logits.log_softmax(-1)
        out = []
        for i, ex in enumerate(examples):
            n_ans = len(ex.answer)
            if n_ans == 0:
                out.append(torch.stack([logp.new_zeros(()), logp.new_zeros(())]))
                continue
            # answer token j sits at row position s - n_ans + j and is predicted from the one before
            pred_pos = torch.arange(s - n_ans - 1, s - 1)
            tgt = torch.as_tensor(ex.answer)
            nll = -logp[i, pred_pos, tgt].sum()
            out.append(torch.stack([nll, nll.new_tensor(float(n_ans))]))
        return torch.stack(out)

    @torch.no_grad()
    def generate(
        self, examples: Sequence[Example], group: TaskGroup, max_new_tokens: int = 32
    ) -> list[Generation]:
        """Greedy decoding; each row stops at the end token or the length cap."""
        self.invocations[TaskGroup(group).value] += len(examples)
        if not examples:
            return []
        z, lengths, _ = self.batch_inputs(examples, group)
        out_ids: list[list[int]] = [[] for _ in examples]
        done = [False] * len(examples)
        for _ in range(max_new_tokens):
            logits = self.forward_adapted(z, group, lengths)
            nxt = logits[:, -1].argmax(-1).tolist()
            for i, t in enumerate(nxt):
                if not done[i]:
                    if t == self.tokenizer.eos_id:
                        done[i] = True
                    else:
                        out_ids[i].append(t)
            if all(done):
                break
            if z.shape[1] + 1 > self.cfg.max_seq_len:
                break
            z = torch.cat([z, self.embed(torch.as_tensor(nxt))[:, None]], dim=1)
            lengths = [n + 1 for n in lengths]
        return [Generation(self.tokenizer.decode(ids), ids, not d) for ids, d in zip(out_ids, done)]

    def make_example(self, video: torch.Tensor, question: str, answer: str | None = None) -> Example:
        tok = self.tokenizer
        prompt = [tok.bos_id] + tok.encode(question) + [tok.sep_id]
        ans = tok.encode(answer) + [tok.eos_id] if answer is not None else []
        return Example(video, prompt, ans)

    # --- parameter blocks -------------------------------------------------

    def group_state(self, group: TaskGroup) -> dict[str, torch.Tensor]:
        g = TaskGroup(group).value
        return {k: v.detach().clone() for k, v in self.state_dict().items() if _block_of(k) == g}

    def base_state(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.state_dict().items() if _block_of(k) is None}

    def load_group_state(self, group: TaskGroup, state: dict[str, torch.Tensor], source: TaskGroup | None = None) -> None:
        """Load a group block, optionally renaming it from another group's keys."""
        dst = TaskGroup(group).value
        src = TaskGroup(source).value if source is not None else dst
        own = self.state_dict()
        with torch.no_grad():
            for key, val in state.items():
                if _block_of(key) != src:
                    continue
                target = rename_block(key, src, dst)
                if target not in own:
                    raise KeyError(f"unexpected parameter {key}")
                own[target].copy_(val)

    def trainable_parameters(self, group: TaskGroup) -> list[nn.Parameter]:
        g = TaskGroup(group).value
        return [p for n, p in self.named_parameters() if _block_of(n) == g]

    def adapter_layers(self) -> list[tuple[str, LoRALinear]]:
        return [(n, m) for n, m in self.named_modules() if isinstance(m, LoRALinear)]


def is_adapter_param(name: str) -> bool:
    return _block_of(name) is not None


def _block_of(key: str) -> str | None:
    """Group a parameter key belongs to, or None for frozen base weights."""
    parts = key.split(".")
    if parts[0] == "projectors":
        return parts[1]
    for i, p in enumerate(parts[:-1]):
        if p in ("lora_A", "lora_B"):
            return parts[i + 1]
    return None


def rename_block(key: str, src: str, dst: str) -> str:
    parts = key.split(".")
    if parts[0] == "projectors":
        parts[1] = dst
    else:
        i = max(i for i, p in enumerate(parts) if p in ("lora_A", "lora_B"))
        parts[i + 1] = dst
    return ".".join(parts)


def build_model(cfg: BackboneConfig | None = None, tokenizer: Tokenizer | None = None, **overrides: Any) -> CrashChatModel:
    tokenizer = tokenizer or default_tokenizer()
    base = cfg or BackboneConfig(vocab_size=len(tokenizer))
    d = base.to_dict()
    d.update(overrides)
    if not d.get("vocab_size"):
        d["vocab_size"] = len(tokenizer)
    return CrashChatModel(BackboneConfig.from_dict(d), tokenizer)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


class CheckpointError(ValueError):
    pass


def checkpoint_payload(model: CrashChatModel, meta: dict[str, Any] | None = None) -> dict[str, Any]:
    return {
        "config": model.cfg.to_dict(),
        "vocab": list(model.tokenizer.vocab),
        "base": model.base_state(),
        "groups": {g.value: model.group_state(g) for g in GROUPS},
        "meta": dict(meta or {}),
    }


def save_checkpoint(model: CrashChatModel, path, meta: dict[str, Any] | None = None) -> None:
    torch.save(checkpoint_payload(model, meta), path)


def checkpoint_bytes(model: CrashChatModel, meta: dict[str, Any] | None = None) -> bytes:
    buf = io.BytesIO()
    torch.save(checkpoint_payload(model, meta), buf)
    return buf.getvalue()


def read_checkpoint(path) -> dict[str, Any]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several unrelated types here
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc
    missing = {"config", "vocab", "base", "groups"} - set(payload)
    if missing:
        raise CheckpointError(f"checkpoint {path} lacks {sorted(missing)}")
    return payload


def model_from_payload(payload: dict[str, Any]) -> CrashChatModel:
    model = CrashChatModel(BackboneConfig.from_dict(payload["config"]), Tokenizer(payload["vocab"]))
    dtype = next(iter(payload["base"].values())).dtype
    model.to(dtype)
    own = model.state_dict()
    with torch.no_grad():
        for key, val in payload["base"].items():
            own[key].copy_(val)
    for g, state in payload["groups"].items():
        model.load_group_state(TaskGroup(g), state)
    return model


def load_checkpoint(path) -> tuple[CrashChatModel, dict[str, Any]]:
    payload = read_checkpoint(path)
    return model_from_payload(payload), payload.get("meta", {})
