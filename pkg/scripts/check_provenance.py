#!/usr/bin/env python3
"""Re-hash every artifact recorded in a run directory's manifests and report
any mismatch or missing file.

    python3 scripts/check_provenance.py run_desk
"""

import sys

from tractfuse import pipeline


def main():
    if len(sys.argv) != 2:
        sys.exit(__doc__.strip())
    problems = pipeline.verify_provenance(sys.argv[1])
    if problems:
        for p in problems:
            print(f"FAIL {p}")
        sys.exit(1)
    print("ok: all manifest hashes verified")


if __name__ == "__main__":
    main()
