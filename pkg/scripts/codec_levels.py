"""Feature-domain reconstruction error of a trained codec against the number of codebooks used.

    python3 scripts/codec_levels.py BUNDLE_DIR [--utts 50]

Uses held-out utterances (evaluation speakers of the default corpus).
"""

import argparse

import numpy as np

from nacanon.codec import RvqStack, acoustic_frame_vectors
from nacanon.config import Config
from nacanon.corpus import generate_corpus, split_corpus


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("bundle")
    ap.add_argument("--utts", type=int, default=50)
    args = ap.parse_args()

    rvq = RvqStack.load(f"{args.bundle}/rvq.nacq")
    config = Config()
    split = split_corpus(generate_corpus(config), config)
    held_out = (split["enroll"] + split["trial"])[: args.utts]

    x = np.concatenate([acoustic_frame_vectors(u.waveform, rvq.spec, rvq.n_cepstra).frames for u in held_out])
    grid = rvq.quantize(x)
    var = np.mean((x - x.mean(axis=0)) ** 2)
    print("k\tmse\trelative")
    for k in range(1, rvq.q + 1):
        mse = np.mean((x - rvq.reconstruct(grid, k)) ** 2)
        print(f"{k}\t{mse:.5f}\t{mse / var:.4f}")


if __name__ == "__main__":
    main()
