import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from crashchat.datasetkit import template_corpus
from crashchat.model import (
    BackboneConfig,
    CheckpointError,
    ConfigError,
    LoRALinear,
    build_model,
    checkpoint_bytes,
    checkpoint_payload,
    default_tokenizer,
    load_checkpoint,
    model_from_payload,
    read_checkpoint,
    save_checkpoint,
)
from crashchat.schema import TaskGroup

from oracles import dense_adapted_forward

LC, PC = TaskGroup.LC, TaskGroup.PC


@pytest.fixture(scope="module")
def model():
    return build_model(layers=2)


def _randomize_adapters(m, group, scale=0.05, seed=0):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, layer in m.adapter_layers():
            b = layer.lora_B[group.value]
            b.copy_(torch.randn(b.shape, generator=gen, dtype=b.dtype) * scale)


# --- tokenizer ---------------------------------------------------------------


def test_tokenizer_round_trips_templates():
    tok = default_tokenizer()
    for text in template_corpus():
        assert tok.decode(tok.encode(text)) == text
    assert tok.decode(tok.encode("The crash occurs from 12.5s to 14.0s.")) == "The crash occurs from 12.5s to 14.0s."


def test_unknown_words_map_to_unk():
    tok = default_tokenizer()
    assert tok.encode("zebra") == [tok.unk_id]


# --- config ------------------------------------------------------------------


@pytest.mark.parametrize("kw", [{"rank": 0}, {"rank": 17}, {"heads": 5}, {"adapted": ("q", "zz")}, {"d_v": 0}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        BackboneConfig(vocab_size=10, **kw)


def test_config_dict_round_trip():
    cfg = BackboneConfig(vocab_size=10, adapted=("q", "v"))
    assert BackboneConfig.from_dict(cfg.to_dict()) == cfg


# --- encoder, projector, assembly -------------------------------------------


def test_encoder_shapes_and_pooling(model):
    frames = np.random.default_rng(0).standard_normal((64, 16))
    enc = build_model(layers=1, pool_stride=4).encode_video(frames)
    assert enc.shape == (16, 32)
    assert model.encode_video(np.zeros((11, 16))).shape == (3, 32)


def test_encoder_constant_video_gives_equal_tokens(model):
    frames = np.tile(np.arange(16.0), (23, 1))
    toks = model.encode_video(frames)
    direct = torch.nn.functional.gelu(model.encoder.proj(torch.as_tensor(frames[:1], dtype=torch.float32)))
    for t in toks:
        torch.testing.assert_close(t, direct[0])


def test_encoder_rejects_wrong_feature_dim(model):
    with pytest.raises(ConfigError):
        model.encode_video(np.zeros((10, 3)))


def test_projector_shapes_and_isolation(model):
    toks = model.encode_video(np.random.default_rng(1).standard_normal((80, 16)))
    before = model.project(toks, LC).detach().clone()
    assert before.shape == (16, 64)
    with torch.no_grad():
        model.projectors["Pc"].weight.add_(1.0)
    try:
        assert torch.equal(model.project(toks, LC), before)
    finally:
        with torch.no_grad():
            model.projectors["Pc"].weight.sub_(1.0)
    with pytest.raises(ValueError):
        model.project(toks, "Xx")


def test_zero_projector_gives_zero_output():
    m = build_model(layers=1)
    with torch.no_grad():
        m.projectors["Lc"].weight.zero_()
        m.projectors["Lc"].bias.zero_()
    assert not m.project(torch.ones(5, 32), LC).any()


def test_assemble_lengths_and_truncation():
    m = build_model(layers=1, max_seq_len=30)
    v, t = torch.zeros(16, 64), torch.ones(20, 64)
    with pytest.warns(UserWarning, match="dropping 6 video tokens"):
        z = m.assemble(v, t)
    assert z.shape == (30, 64)
    assert torch.equal(z[10:], t)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert m.assemble(torch.zeros(16, 64), torch.zeros(0, 64)).shape == (16, 64)
        assert build_model(layers=1).assemble(v, t).shape == (36, 64)


# --- adapted forward -----------------------------------------------------------


def test_identity_at_init(model):
    z = torch.randn(1, 12, 64, generator=torch.Generator().manual_seed(0))
    frozen = model.forward_adapted(z, None)
    for g in (LC, PC):
        assert (model.forward_adapted(z, g) - frozen).abs().max() < 1e-6


def test_forward_matches_dense_oracle():
    m = build_model(layers=2).double()
    _randomize_adapters(m, PC, scale=0.2)
    z = torch.randn(14, 64, dtype=torch.float64, generator=torch.Generator().manual_seed(3))
    for g in (None, PC):
        torch.testing.assert_close(m.forward_adapted(z, g), dense_adapted_forward(m, z, g), atol=1e-5, rtol=0)


def test_full_rank_lora_reproduces_dense_weight_update():
    d = 64
    layer = LoRALinear(d, d, rank=d).double()
    gen = torch.Generator().manual_seed(1)
    delta = torch.randn(d, d, generator=gen, dtype=torch.float64) * 0.1
    with torch.no_grad():
        layer.lora_A["Lc"].copy_(torch.eye(d, dtype=torch.float64))
        layer.lora_B["Lc"].copy_(delta)
    x = torch.randn(5, d, generator=gen, dtype=torch.float64)
    expected = x @ (layer.base.weight + delta).T + layer.base.bias
    torch.testing.assert_close(layer(x, LC), expected, atol=1e-5, rtol=0)


def test_left_padding_does_not_change_logits(model):
    tok = model.tokenizer
    v = model.encode_video(np.random.default_rng(2).standard_normal((40, 16)))
    short = model.make_example(v, "Does this video contain a traffic crash?")
    long = model.make_example(v, "Describe the crash in this video. Describe the crash in this video.")
    z, lens, _ = model.batch_inputs([short, long], LC)
    batched = model.forward_adapted(z, LC, lens)
    alone = model.forward_adapted(model.batch_inputs([short], LC)[0], LC)
    n = lens[0]
    torch.testing.assert_close(batched[0, -n:], alone[0], atol=1e-5, rtol=1e-5)
    assert tok.decode([]) == ""


def test_low_rank_structure(model):
    m = build_model(layers=2)
    _randomize_adapters(m, LC, scale=1.0)
    for _, layer in m.adapter_layers():
        prod = layer.lora_B["Lc"].double() @ layer.lora_A["Lc"].double()
        assert torch.linalg.matrix_rank(prod) <= m.cfg.rank


def test_gradients_stay_in_the_routed_group():
    m = build_model(layers=2)
    _randomize_adapters(m, LC)
    _randomize_adapters(m, PC)
    v = m.encode_video(np.ones((30, 16)))
    ex = m.make_example(v, "Does this video contain a traffic crash?", "Yes, the video contains a crash.")
    m.answer_nll([ex], LC)[:, 0].sum().backward()
    for name, p in m.named_parameters():
        if ".Pc" in name or name.startswith("projectors.Pc"):
            assert p.grad is None or not p.grad.any(), name
        elif ".Lc" in name or name.startswith("projectors.Lc"):
            assert p.grad is not None and p.grad.any(), name
        else:
            assert not p.requires_grad, name


# --- generation ----------------------------------------------------------------


def test_generate_is_deterministic_and_counts_invocations(model):
    v = model.encode_video(np.random.default_rng(5).standard_normal((30, 16)))
    ex = [model.make_example(v, "When does the crash occur in this video?")]
    model.invocations.clear()
    a = model.generate(ex, PC, 6)
    b = model.generate(ex, PC, 6)
    assert a[0].text == b[0].text and a[0].ids == b[0].ids
    assert model.invocations["Pc"] == 2 and model.invocations["Lc"] == 0


def test_generate_length_cap_zero_is_flagged(model):
    v = model.encode_video(np.zeros((10, 16)))
    g = model.generate([model.make_example(v, "q")], LC, 0)[0]
    assert g.text == "" and g.ids == [] and g.truncated


# --- checkpoints -----------------------------------------------------------------


def test_checkpoint_round_trip_and_block_swap(tmp_path):
    a = build_model(layers=2, seed=1)
    _randomize_adapters(a, PC, seed=7)
    path = tmp_path / "a.pt"
    save_checkpoint(a, path, {"note": "x"})
    b, meta = load_checkpoint(path)
    assert meta == {"note": "x"}
    for (k, va), (_, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(va, vb), k
    # swap only the Pc block into a fresh model with the same base
    c = build_model(layers=2, seed=1)
    c.load_group_state(PC, read_checkpoint(path)["groups"]["Pc"])
    for k, v in a.group_state(PC).items():
        assert torch.equal(c.state_dict()[k], v)
    assert checkpoint_bytes(a, {"n": 1}) == checkpoint_bytes(a, {"n": 1})


def test_rename_loads_lc_block_into_pc_slot():
    a = build_model(layers=1)
    _randomize_adapters(a, LC, seed=3)
    b = model_from_payload(checkpoint_payload(a))
    b.load_group_state(PC, a.group_state(LC), source=LC)
    for (_, la), (_, lb) in zip(a.adapter_layers(), b.adapter_layers()):
        assert torch.equal(la.lora_B["Lc"], lb.lora_B["Pc"])


def test_bad_checkpoint_rejected(tmp_path):
    p = tmp_path / "bad.pt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        read_checkpoint(p)
    torch.save({"config": {}}, p)
    with pytest.raises(CheckpointError, match="lacks"):
        read_checkpoint(p)


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 60), st.integers(1, 8))
def test_token_count_is_ceil_of_frames_over_stride(n_frames, stride):
    m = build_model(layers=1, pool_stride=stride)
    assert m.encode_video(np.zeros((n_frames, 16))).shape[0] == -(-n_frames // stride)
