"""End-to-end run on the synthetic corpus through the CLI:
synth -> extract -> stats -> train -> eval -> export -> size.

    python scripts/run_synthetic.py --work /tmp/gtasc-synth
    python scripts/run_synthetic.py --work /tmp/gtasc-synth --max-epochs 20 --duration 2.05
"""

import argparse
import sys
import time
from pathlib import Path

from gtasc.cli import main as gtasc


def step(*argv):
    t0 = time.perf_counter()
    print(f"$ gtasc {' '.join(map(str, argv))}", flush=True)
    code = gtasc([str(a) for a in argv])
    print(f"  -> exit {code} in {time.perf_counter() - t0:.1f}s", flush=True)
    if code:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", type=Path, required=True)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--clips-per-class", type=int, default=30)
    ap.add_argument("--duration", type=float, default=2.05, help="seconds; 2.05 gives 101 frames")
    ap.add_argument("--max-epochs", type=int, default=200)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    w = args.work
    corpus, cache = w / "corpus", w / "cache"
    step("synth", "--out-dir", corpus, "--seed", args.seed, "--clips-per-class", args.clips_per_class,
         "--duration", args.duration)
    for split in ("train", "val"):
        step("extract", "--meta", corpus / f"{split}.tsv", "--cache", cache, "--split", split,
             "--jobs", args.jobs)
    step("stats", "--cache", cache, "--out", w / "stats.bin")
    step("-v", "train", "--cache", cache, "--stats", w / "stats.bin", "--out", w / "model.ascm",
         "--seed", args.seed, "--max-epochs", args.max_epochs)
    step("eval", "--model", w / "model.ascm", "--meta", corpus / "val.tsv")
    step("export", "--model", w / "model.ascm", "--out", w / "model16.ascm", "--precision", "fp16")
    step("size", "--model", w / "model16.ascm")


if __name__ == "__main__":
    main()
