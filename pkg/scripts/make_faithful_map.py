"""Regenerate the toy_faithful fixture: 120 x 120 x 30 m, nine buildings, two pads.

Each building is a staircase of 1 m tiers ending in a top floor, plus a
rooftop 2.5 m above that top floor: out of reach of a single jump, inside
double-jump height. Two pads sit against rooftop walls.
"""
import json
import sys
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "navgym" / "maps" / "toy_faithful.map.json"


def building(cx, cz, tiers):
    solids = []
    for t in range(tiers):
        solids.append({"min": [cx - 7.0 + 3.0 * t, 0.0, cz - 7.0], "max": [cx + 7.0, t + 1.0, cz + 7.0]})
    top = float(tiers)
    solids.append({"min": [cx - 7.0 + 3.0 * tiers, top, cz - 7.0], "max": [cx + 7.0, top + 2.5, cz + 7.0]})
    return solids


def main():
    solids = [{"min": [-60.0, -1.0, -60.0], "max": [60.0, 0.0, 60.0]}]
    centers = [(-35.0, -35.0), (0.0, -35.0), (35.0, -35.0),
               (-35.0, 0.0), (0.0, 0.0), (35.0, 0.0),
               (-35.0, 35.0), (0.0, 35.0), (35.0, 35.0)]
    for i, (cx, cz) in enumerate(centers):
        solids.extend(building(cx, cz, 1 + i % 3))
    pads = [
        {"trigger": {"min": [-26.0, 0.0, -36.0], "max": [-24.0, 0.2, -34.0]}, "launch_speed": 16.0},
        {"trigger": {"min": [44.0, 0.0, 34.0], "max": [46.0, 0.2, 36.0]}, "launch_speed": 16.0},
    ]
    doc = {
        "name": "toy_faithful",
        "bounds": {"min": [-60.0, -1.0, -60.0], "max": [60.0, 29.0, 60.0]},
        "solids": solids,
        "pads": pads,
        "spawn_region": {"min": [-60.0, -1.0, -60.0], "max": [60.0, 29.0, 60.0]},
        "goal_epsilon": 1.0,
    }
    OUT.write_text(json.dumps(doc, indent=1) + "\n")
    print(f"wrote {OUT} ({len(solids)} solids, {len(pads)} pads)", file=sys.stderr)


if __name__ == "__main__":
    main()
