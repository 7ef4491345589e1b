"""Desk-scale variant comparison: standard vs DHiF detectors over five seeds.

Trains four detector variants (all-standard, DHiF at levels 2-3, DHiF at
level 1, DHiF at levels 2-3 with a sigmoid filter mapping) on the default
synthetic split, then prints the comparisons the study is meant to answer.
Runs resume from ``results/trend_study`` so the script can be interrupted.
Expect roughly two hours on a single CPU core.
"""
from pathlib import Path

from dhif.experiments import StudyConfig, run_study, trend_summary

OUT = Path(__file__).resolve().parent.parent / "results" / "trend_study"

if __name__ == "__main__":
    cfg = StudyConfig()
    records = run_study(cfg, OUT)
    s = trend_summary(records)
    print()
    print("median test IoU per variant:")
    for v, m in sorted(s["median_iou"].items()):
        print(f"  {v:>15s}  {m:.4f}")
    print(f"DHiF(2,3) beats standard in {s['dhif23_wins']}/{len(s['seeds'])} seeds")
    print(f"DHiF(1) beats DHiF(2,3) in {s['level1_violations']}/{len(s['seeds'])} seeds")
    print(f"DHiF(2,3) loses no more IoU under noise in {s['robust_seeds']}/{len(s['seeds'])} seeds")
    print(f"wall clock for the standard vs DHiF(2,3) runs: {s['trend_wall_clock'] / 60:.1f} min")
