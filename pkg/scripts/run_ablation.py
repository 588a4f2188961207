"""
Ablation Script - Dynamic Semantic Mapper

Maps the built-in moving-cube room four times (full model, no moving-class
flow, no free/static flow, static baseline) and prints the map-accuracy
table of the last scan for each run.

Usage:
    python scripts/run_ablation.py [num_scans]
"""

import os
import sys

import pandas as pd

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), '..'))

from config import default_map_config  # noqa: E402
from evaluation import map_accuracy, visible_set  # noqa: E402
from mapper import SemanticMap, step  # noqa: E402
from simworld import render_gt_points, render_scan, room_world  # noqa: E402

RUNS = {
    'full': {},
    'no-bacc': {'bacc': False},
    'no-forc': {'forc': False},
    'static-baseline': {'static_baseline': True},
}


def print_header(title):
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)


def run(spec, map_config, flags):
    """Map every scan of ``spec`` and score the last one."""
    semantic_map = SemanticMap(map_config, spec.registry)
    frame = None
    for t in range(spec.num_scans):
        scan = render_scan(spec, t)
        if scan is None:
            continue
        frame = scan
        step(semantic_map, frame, with_ego_compensation=True, **flags)
    visible = visible_set(semantic_map, frame)
    gt = render_gt_points(spec, frame.time_index)
    return map_accuracy(semantic_map, visible, gt)


def main():
    num_scans = int(sys.argv[1]) if len(sys.argv) > 1 else 20
    spec = room_world(num_scans=num_scans)
    map_config, _ = default_map_config('room')

    summary = []
    for name, flags in RUNS.items():
        print_header(f"Run: {name}")
        report = run(spec, map_config, flags)
        print(report.to_frame(spec.registry).to_string(index=False, float_format=lambda v: f"{v:.4f}"))
        summary.append({'run': name, 'mIoU': report.miou, 'cube IoU': report.iou[3]})

    print_header('Summary')
    print(pd.DataFrame(summary).to_string(index=False, float_format=lambda v: f"{v:.4f}"))


if __name__ == '__main__':
    main()
