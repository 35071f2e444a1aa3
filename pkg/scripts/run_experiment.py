"""Run the full privacy experiment in one process and print the metrics.

    python3 scripts/run_experiment.py --out runs/default
    python3 scripts/run_experiment.py --out runs/t05 --set temperature=0.5

The corpus is generated in memory, the anonymizer is trained on the
pseudo-speaker pool speakers only, and the evaluation protocol is then run on
the remaining speakers.  The bundle, report and score files land in ``--out``.
"""

import argparse
import logging
import time
from pathlib import Path

from nacanon.config import Config
from nacanon.corpus import generate_corpus, split_corpus
from nacanon.pipeline import run_evaluation, train_system


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", required=True)
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    config = Config.load(args.config) if args.config else Config()
    if args.set:
        config = Config.from_text(config.to_text() + "".join(s + "\n" for s in args.set))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    stamp = lambda msg: print(f"{time.perf_counter() - t0:7.1f}s  {msg}", flush=True)
    utts = generate_corpus(config)
    split = split_corpus(utts, config)
    stamp(f"corpus: {len(utts)} utterances, {len(split['external'])} external / "
          f"{len(split['enroll'])} enroll / {len(split['trial'])} trial")

    system, losses = train_system(config, split["external"], progress=stamp)
    system.save(out / "bundle")
    (out / "bundle" / "config.txt").write_text(config.to_text())

    result = run_evaluation(system, config, split, progress=stamp)
    (out / "report.txt").write_text(result.report.to_text())
    (out / "scores_original.tsv").write_text(result.original_attack.to_text())
    (out / "scores_anonymized.tsv").write_text(result.anonymized_attack.to_text())
    with open(out / "losses.tsv", "w") as fh:
        for name, trace in losses.items():
            fh.write(name + "\t" + " ".join(f"{x:.4f}" for x in trace) + "\n")
    print(result.report.to_text(), end="")


if __name__ == "__main__":
    main()
