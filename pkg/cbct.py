#!/usr/bin/env python3
"""
Cone-beam CT laboratory - command-line entry point.

    python3 cbct.py phantom  --kind sphere --out data/sphere.raw
    python3 cbct.py simulate --volume data/sphere.raw --views 20 --out data/proj
    python3 cbct.py fdk      --projections data/proj --out data/fdk.raw
    python3 cbct.py eval     --reference data/sphere.raw --estimate data/fdk.raw

Run `python3 cbct.py <verb> --help` for the flags of each verb.
"""

import sys

from cbct_lab.cli import main

if __name__ == "__main__":
    sys.exit(main())
