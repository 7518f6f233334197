"""Regenerate the manual link file for toy_faithful.

Candidate links come from simulating every ability; a spanning subset
(cheapest first, union-find over walkable components) is kept, together
with the cheapest return link for each joined pair when one exists.
"""
import json
import sys
from pathlib import Path

from navgym.navmesh import ABILITIES, auto_jump_links, generate_navmesh
from navgym.sim import SimConfig
from navgym.world import bake_occupancy, resolve_map

OUT = Path(__file__).resolve().parents[1] / "src" / "navgym" / "maps" / "toy_faithful.links.json"


def main():
    m = resolve_map("toy_faithful")
    grid = bake_occupancy(m, 0.5)
    base = generate_navmesh(m, grid)
    parent = list(range(len(base.polygons)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for e in base.edges:
        parent[find(e.src)] = find(e.dst)
    region = [find(i) for i in range(len(parent))]

    cfg = SimConfig()
    links = []
    for ability in ABILITIES:
        links += auto_jump_links(base, m, cfg, ability).links
    links.sort(key=lambda e: (e.cost, e.src, e.dst))
    cheapest = {}
    for e in links:
        cheapest.setdefault((region[e.src], region[e.dst]), e)

    parent = list(range(len(base.polygons)))
    chosen = []
    for (ra, rb), e in sorted(cheapest.items(), key=lambda kv: kv[1].cost):
        if ra == rb or find(ra) == find(rb):
            continue
        parent[find(ra)] = find(rb)
        chosen.append(e)
        back = cheapest.get((rb, ra))
        if back is not None:
            chosen.append(back)
    doc = [{"takeoff": list(e.takeoff), "landing": list(e.landing), "ability": e.ability} for e in chosen]
    OUT.write_text(json.dumps(doc, indent=1) + "\n")
    print(f"wrote {OUT} ({len(doc)} links)", file=sys.stderr)


if __name__ == "__main__":
    main()
