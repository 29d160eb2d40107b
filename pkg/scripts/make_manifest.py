#!/usr/bin/env python3
"""Write an annotation-only manifest with a given class balance (default: the full-corpus counts).

Entries carry annotations and texts but no feature files, so ingestion uses
placeholder frames. Useful for exercising dataset arithmetic and splitting.
"""

import argparse
import json
import random


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--positives", type=int, default=11_322)
    p.add_argument("--negatives", type=int, default=7_063)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    args = p.parse_args()
    rng = random.Random(args.seed)
    sources = ("MM-AU", "Nexar", "D2City")
    with open(args.out, "w") as fh:
        for i in range(args.positives):
            pre = rng.choice((1.0, 1.5, 2.0, 2.5, 3.0))
            crash = pre + rng.choice((1.0, 1.5, 2.0))
            end = crash + rng.choice((1.5, 2.0, 2.5))
            fh.write(json.dumps({
                "videoId": f"pos-{i:05d}", "label": True, "source": sources[i % 3],
                "annotation": {"preCrashStart": pre, "crashStart": crash, "crashEnd": end, "duration": end + 2.0},
                "descriptionText": "A vehicle collides with another vehicle.",
                "causeText": "The driver failed to keep a safe distance.",
                "preventionText": "Keep a safe distance and reduce speed.",
            }) + "\n")
        for i in range(args.negatives):
            fh.write(json.dumps({"videoId": f"neg-{i:05d}", "label": False, "source": sources[i % 3],
                                 "duration": rng.choice((6.0, 8.0, 10.0))}) + "\n")
    print(f"wrote {args.positives + args.negatives} entries to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
