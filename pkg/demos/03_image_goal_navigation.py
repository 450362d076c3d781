"""Closed-loop image-goal navigation: map a world once, then hand the robot
a sequence of goal images and let retrieval + Dijkstra + the local planner
drive it there.

Run:  python demos/03_image_goal_navigation.py [preset]
"""

import sys

import numpy as np

from vloc.geometry import CameraIntrinsics
from vloc.mapgraph import build_map, select_keyframes
from vloc.matching import match_oracle
from vloc.planning import NavConfig, run_mission
from vloc.simworld import OdomNoise, generate_segment, make_preset

preset = sys.argv[1] if len(sys.argv) > 1 else "rooms"
K = CameraIntrinsics(fx=100.0, fy=100.0, cx=64.0, cy=64.0, width=128, height=128)


def matcher(ref, query):
    return match_oracle(ref, query, seed=0)


world, route = make_preset(preset, seed=7)
route_len = sum(float(np.linalg.norm(np.asarray(b) - np.asarray(a)))
                for a, b in zip(route, route[1:]))
mapping = generate_segment(world, route, K, camera_rate=2.0, seed=1,
                           noise=OdomNoise.zero())
keyframes = select_keyframes(mapping.segment, budget=int(route_len / 1.2) + 8,
                             grid_res=0.1)
topo = build_map(mapping.segment, keyframes, matcher=matcher,
                 covis_threshold=30, world=world)
print(f"{preset}: mapped {route_len:.0f} m into {len(topo.nodes)} nodes "
      f"({len(topo.components())} component)")

rng = np.random.default_rng(1)
goal_ids = rng.choice(np.arange(1, len(topo.nodes)), size=3, replace=False)
goal_images = [topo.nodes[int(i)].image for i in goal_ids]
print(f"goal images taken at nodes {[int(i) for i in goal_ids]}")

reports = run_mission(world, topo, goal_images, K, matcher,
                      start=(route[0][0], route[0][1], 0.0), seed=5,
                      config=NavConfig(timeout=150.0))

print("\n goal  node  reached  time[s]  path[m]  shortest[m]  final dist[m]")
for i, rep in enumerate(reports):
    print(f"  {i}    {rep.goal_node:4d}   {'yes' if rep.success else ' no'}   "
          f"{rep.time_s:7.1f}  {rep.path_length_m:7.1f}  "
          f"{rep.shortest_path_m:9.1f}  {rep.final_goal_dist_m:10.2f}")
print(f"\n{sum(r.success for r in reports)}/{len(reports)} goals reached")
