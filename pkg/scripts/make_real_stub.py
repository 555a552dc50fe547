#!/usr/bin/env python3
"""Write a synthetic stand-in for a 195-record measured sweep in the import format.

    python scripts/make_real_stub.py real.sdoa [--snr 30] [--seed 0]
    sparsedoa import-real --input real.sdoa --checkpoint runs/desk/models/augmented.ckpt --pair 0,7
"""
import argparse

from sparsedoa.dataset import synthesize_real


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("path")
    p.add_argument("--records", type=int, default=195)
    p.add_argument("--snr", type=float, default=30.0)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    with open(a.path, "wb") as fh:
        fh.write(synthesize_real(a.records, snr_db=a.snr, seed=a.seed))
    print(f"wrote {a.records} records to {a.path}")


if __name__ == "__main__":
    main()
