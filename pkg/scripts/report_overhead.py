#!/usr/bin/env python3
"""Print the analytic cost table for the bundled full-scale network specs.

Usage: python scripts/report_overhead.py [CxTxHxW]   (default 3x16x224x224)
"""

import sys
from pathlib import Path

from srtg.config import network_spec, parse_shape, read_config
from srtg.opcount import count_macs

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def main():
    shape = parse_shape(sys.argv[1]) if len(sys.argv) > 1 else (3, 16, 224, 224)
    print(f"input {'x'.join(map(str, shape))}")
    print(f"{'spec':<18} {'GMACs':>10} {'GFLOPs':>10} {'lstm+gate M':>12} {'overhead':>9}")
    for name in ("r3d34_srtg.cfg", "r3d50_srtg.cfg"):
        spec = network_spec(read_config(str(CONFIGS / name)))
        counts = count_macs(spec, shape)
        print(
            f"{name:<18} {counts.total / 1e9:>10.3f} {2 * counts.total / 1e9:>10.3f} "
            f"{counts.srtg_macs / 1e6:>12.2f} {100 * counts.srtg_overhead_ratio:>8.3f}%"
        )


if __name__ == "__main__":
    main()
