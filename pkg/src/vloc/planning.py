"""Hierarchical planning and navigation evaluation.

Global planning is Dijkstra over the connectivity level of the map; its
traversed nodes become subgoals. The local planner scores a fixed fan of
constant-curvature arcs against the single-frame depth point cloud
(rotate-in-place is part of the primitive set, so a subgoal behind the
robot naturally wins rotation). Closed-loop navigation ties the simulator,
the localization pipeline, and both planners together; trajectory quality
is measured by no-alignment absolute trajectory error.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyMap, NoMatches, NoPath, NotLocalized
from .geometry import CameraIntrinsics, Pose
from .pipeline import Pipeline, PipelineConfig, PipelineMode
from .retrieval import extract_descriptor, top_k
from .simworld import GridWorld, SimRobot, pose_to_planar, render

SWITCH_RADIUS_DEFAULT = 1.0
GOAL_RADIUS_DEFAULT = 0.5
ROBOT_RADIUS_DEFAULT = 0.3
CURVATURES_DEFAULT = (0.0, 0.2, -0.2, 0.5, -0.5, 1.0, -1.0)
ARC_LENGTH_DEFAULT = 2.0
ARC_DS_DEFAULT = 0.1
CURVATURE_PENALTY_DEFAULT = 0.1


@dataclass
class GlobalPlan:
    """Dijkstra node path with a subgoal cursor."""

    node_path: list
    length: float
    subgoal_index: int = 0


def plan_global(topo_map, start_node: int, goal_node: int) -> GlobalPlan:
    """Shortest path on the connectivity graph; deterministic tie-break by
    smaller node id in the priority order."""
    n = len(topo_map.nodes)
    for node in (start_node, goal_node):
        if not 0 <= node < n:
            raise ValueError(f"node {node} not in map")
    if start_node == goal_node:
        return GlobalPlan(node_path=[start_node], length=0.0)
    dist = {start_node: 0.0}
    pred = {}
    heap = [(0.0, start_node)]
    done = set()
    while heap:
        d, cur = heapq.heappop(heap)
        if cur in done:
            continue
        done.add(cur)
        if cur == goal_node:
            break
        for nbr, w in topo_map.cng_neighbors(cur):
            nd = d + w
            if nbr not in dist or nd < dist[nbr]:
                dist[nbr] = nd
                pred[nbr] = cur
                heapq.heappush(heap, (nd, nbr))
    if goal_node not in done:
        raise NoPath(f"nodes {start_node} and {goal_node} are not connected")
    path = [goal_node]
    while path[-1] != start_node:
        path.append(pred[path[-1]])
    path.reverse()
    return GlobalPlan(node_path=path, length=dist[goal_node])


def resolve_goal(topo_map, goal_image):
    """Top-1 retrieval of the goal image; returns (node_id, similarity)."""
    if not topo_map.nodes:
        raise EmptyMap("cannot resolve a goal against an empty map")
    node_id, sim = top_k(extract_descriptor(goal_image), topo_map, k=1).top1()
    return node_id, sim


def nearest_node(topo_map, position) -> int:
    dists = np.linalg.norm(topo_map.node_positions() - np.asarray(position),
                           axis=1)
    return int(np.argmin(dists))


def robot_frame_of(pose: Pose):
    """Planar ground frame at the camera: x forward, y left, z up."""
    x, y, yaw = pose_to_planar(pose)
    return np.array([x, y]), yaw


def to_robot_frame(pose: Pose, point_world) -> np.ndarray:
    origin, yaw = robot_frame_of(pose)
    d = np.asarray(point_world, dtype=float)[:2] - origin
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([c * d[0] + s * d[1], -s * d[0] + c * d[1], 0.0])


def next_subgoal(plan: GlobalPlan, topo_map, robot_pose: Pose,
                 switch_radius: float = SWITCH_RADIUS_DEFAULT,
                 goal_radius: float = GOAL_RADIUS_DEFAULT):
    """Advance the cursor past subgoals within switch_radius, then return
    the active subgoal in the robot frame, or None when the final node is
    reached within goal_radius (Done)."""
    origin, _ = robot_frame_of(robot_pose)
    while plan.subgoal_index < len(plan.node_path):
        target = topo_map.nodes[plan.node_path[plan.subgoal_index]].pose.t
        dist = float(np.linalg.norm(target[:2] - origin))
        last = plan.subgoal_index == len(plan.node_path) - 1
        if last:
            if dist < goal_radius:
                return None
            break
        if dist < switch_radius:
            plan.subgoal_index += 1
            continue
        break
    target = topo_map.nodes[plan.node_path[plan.subgoal_index]].pose.t
    return to_robot_frame(robot_pose, target)


# ---------------------------------------------------------------------------
# local planning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PrimitiveSet:
    """Constant-curvature arc fan plus rotate-in-place."""

    curvatures: tuple = CURVATURES_DEFAULT
    arc_length: float = ARC_LENGTH_DEFAULT
    ds: float = ARC_DS_DEFAULT

    def __post_init__(self):
        if 0.0 not in self.curvatures:
            raise ValueError("primitive fan must include the straight arc")
        for k in self.curvatures:
            if k != 0.0 and -k not in self.curvatures:
                raise ValueError("primitive fan must be symmetric in curvature")

    def arc_points(self, curvature: float, length: float | None = None) -> np.ndarray:
        """Samples along one arc; ``length`` truncates below the nominal
        arc length (a short final approach would otherwise never score
        better than rotating in place, since full-length endpoints all
        overshoot a near subgoal)."""
        arc_len = self.arc_length if length is None else \
            min(self.arc_length, max(2 * self.ds, length))
        s = np.arange(self.ds, arc_len + self.ds / 2, self.ds)
        if abs(curvature) < 1e-12:
            return np.stack([s, np.zeros_like(s)], axis=1)
        return np.stack([np.sin(curvature * s) / curvature,
                         (1.0 - np.cos(curvature * s)) / curvature], axis=1)


ROTATE_IN_PLACE = "rotate"


def depth_to_obstacles(depth: np.ndarray, K: CameraIntrinsics,
                       z_band=(0.15, 1.5), max_range: float = 3.5) -> np.ndarray:
    """Robot-frame 2-D obstacle points from one depth image.

    The camera is level, so the fixed mount maps camera (x right, y down,
    z forward) to robot (x forward, y left, z up); floor points fall below
    the z band and are not obstacles."""
    h, w = depth.shape
    vv, uu = np.nonzero(depth > 0)
    d = depth[vv, uu]
    x_cam = (uu - K.cx) / K.fx * d
    y_cam = (vv - K.cy) / K.fy * d
    x_fwd = d
    y_left = -x_cam
    z_up = -y_cam
    keep = (z_up > z_band[0]) & (z_up < z_band[1]) & (x_fwd < max_range)
    return np.stack([x_fwd[keep], y_left[keep]], axis=1)


def plan_local(depth: np.ndarray, K: CameraIntrinsics, subgoal_robot,
               primitives: PrimitiveSet = PrimitiveSet(),
               robot_radius: float = ROBOT_RADIUS_DEFAULT,
               curvature_penalty: float = CURVATURE_PENALTY_DEFAULT,
               v_nominal: float = 0.8, w_nominal: float = 1.0,
               camera_z: float = 1.0):
    """Score the primitive fan against the single-frame obstacle cloud.

    Returns ((v, w), chosen) where chosen is the curvature or the
    rotate-in-place marker. Rotation is the universal fallback and also a
    scored member of the set, so it wins when every arc moves away from
    the subgoal (e.g. the subgoal lies behind the robot)."""
    subgoal = np.asarray(subgoal_robot, dtype=float)[:2]
    obstacles = depth_to_obstacles(depth, K, z_band=(0.15, max(0.3, camera_z + 0.4)))
    subgoal_dist = float(np.linalg.norm(subgoal))
    best = (subgoal_dist
            + curvature_penalty * max(abs(k) for k in primitives.curvatures))
    choice = ROTATE_IN_PLACE
    for k in primitives.curvatures:
        pts = primitives.arc_points(k, length=subgoal_dist)
        if len(obstacles):
            d2 = ((pts[:, None, :] - obstacles[None, :, :]) ** 2).sum(axis=2)
            if float(d2.min()) < robot_radius ** 2:
                continue
        cost = float(np.linalg.norm(pts[-1] - subgoal)) + curvature_penalty * abs(k)
        if cost < best - 1e-12:
            best = cost
            choice = k
    if choice == ROTATE_IN_PLACE:
        direction = 1.0 if math.atan2(subgoal[1], subgoal[0]) >= 0.0 else -1.0
        return (0.0, direction * w_nominal), ROTATE_IN_PLACE
    v = v_nominal if choice == 0.0 else min(v_nominal, w_nominal / abs(choice))
    return (v, choice * v), choice


# ---------------------------------------------------------------------------
# trajectory evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AteReport:
    rmse: float
    errors: np.ndarray
    matched: int


def compute_ate(gt_traj, est_traj, max_dt: float = 0.05) -> AteReport:
    """No-alignment ATE: both trajectories already live in the map's world
    frame, so any alignment would mask exactly the error being measured.
    Pairs are associated by nearest timestamp within max_dt."""
    if not gt_traj or not est_traj:
        raise NoMatches("empty trajectory")
    gt_ts = np.array([t for t, _ in gt_traj])
    errors = []
    for ts, pose in est_traj:
        k = int(np.argmin(np.abs(gt_ts - ts)))
        if abs(gt_ts[k] - ts) > max_dt:
            continue
        errors.append(float(np.linalg.norm(pose.t - gt_traj[k][1].t)))
    if not errors:
        raise NoMatches("no timestamp pairs within max_dt")
    errors = np.array(errors)
    return AteReport(rmse=float(np.sqrt(np.mean(errors ** 2))),
                     errors=errors, matched=len(errors))


# ---------------------------------------------------------------------------
# closed-loop navigation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NavConfig:
    switch_radius: float = SWITCH_RADIUS_DEFAULT
    goal_radius: float = GOAL_RADIUS_DEFAULT
    robot_radius: float = ROBOT_RADIUS_DEFAULT
    curvature_penalty: float = CURVATURE_PENALTY_DEFAULT
    primitives: PrimitiveSet = PrimitiveSet()
    # a navigation mission gates global localization harder than the bare
    # pipeline default: one false accept plants a bogus prior and sends the
    # robot off the map
    pipeline: PipelineConfig = PipelineConfig(gl_min_sim=0.65, max_failures=12)
    # rotating in place to face a subgoal takes longer than five failed
    # low-rate fixes, so a mission rides through rotations at max_failures=12
    goal_slack: float = 0.85
    v_nominal: float = 0.8
    w_nominal: float = 1.0
    control_dt: float = 0.1
    localize_rate: float = 2.0   # Hz; fixes are low-rate, odometry high-rate
    timeout: float = 240.0
    camera_height: float = 1.0


@dataclass
class NavReport:
    success: bool
    time_s: float
    path_length_m: float
    goal_node: int
    goal_similarity: float
    shortest_path_m: float
    final_goal_dist_m: float
    timed_out: bool
    trajectory: list = field(default_factory=list)   # estimated (t, Pose)
    gt_trajectory: list = field(default_factory=list)

    def csv_row(self, goal_index: int) -> str:
        return (f"{goal_index},{self.goal_node},{int(self.success)},"
                f"{format(self.time_s, '.9g')},{format(self.path_length_m, '.9g')},"
                f"{format(self.shortest_path_m, '.9g')},"
                f"{format(self.final_goal_dist_m, '.9g')},{int(self.timed_out)},"
                f"{format(self.goal_similarity, '.9g')}")

    @staticmethod
    def csv_header() -> str:
        return ("goal_index,goal_node,success,time_s,path_length_m,"
                "shortest_path_m,final_goal_dist_m,timed_out,goal_similarity")


def run_navigation(world: GridWorld, topo_map, goal_image, K: CameraIntrinsics,
                   matcher, start, seed: int = 0,
                   config: NavConfig = NavConfig(),
                   robot: SimRobot | None = None,
                   pipeline: Pipeline | None = None,
                   t_start: float = 0.0) -> NavReport:
    """Full closed loop: render -> localize -> subgoal -> local plan ->
    step, until the goal node is reached or the timeout expires.

    ``robot``/``pipeline``/``t_start`` allow chaining sequential goals in
    one mission while keeping a single clock and fusion graph."""
    goal_node, goal_sim = resolve_goal(topo_map, goal_image)
    if robot is None:
        robot = SimRobot(start[0], start[1], start[2],
                         camera_height=config.camera_height, seed=seed)
    if pipeline is None:
        pipeline = Pipeline(topo_map, K, matcher, config.pipeline)

    goal_pos = topo_map.nodes[goal_node].pose.t
    plan = None
    shortest = 0.0
    t = t_start
    path_len = 0.0
    trajectory = []
    gt_trajectory = [(t, robot.gt_pose)]
    done = False
    n_ticks = int(config.timeout / config.control_dt)
    ticks_per_obs = max(1, int(round(1.0 / (config.localize_rate * config.control_dt))))
    # rotation direction is sticky across ticks: a subgoal straight behind
    # flips its bearing sign every tick otherwise, and Lost-mode search
    # spins would fight Tracking-mode turns
    rot_dir = 0.0
    # commanded-but-blocked motion means a wall outside the camera FOV is
    # pinning the robot; back out briefly before replanning
    bump_ticks = 0
    for tick in range(n_ticks):
        frame = render(world, robot.gt_pose, K)
        if tick % ticks_per_obs == 0 or pipeline.mode is not PipelineMode.TRACKING:
            pipeline.on_observation(frame.observation(), t)
        if bump_ticks > 0:
            bump_ticks -= 1
            cmd = (-0.3, rot_dir * 0.4)
        elif pipeline.mode is PipelineMode.TRACKING:
            est_pose = pipeline.fusion.current_pose()[0]
            if plan is None:
                start_node = nearest_node(topo_map, est_pose.t)
                plan = plan_global(topo_map, start_node, goal_node)
                if shortest == 0.0:     # report the from-start plan length
                    shortest = plan.length
            sub = next_subgoal(plan, topo_map, est_pose, config.switch_radius,
                               config.goal_radius * config.goal_slack)
            if sub is None:
                done = True
                break
            cmd, choice = plan_local(frame.depth, K, sub, config.primitives,
                                     config.robot_radius, config.curvature_penalty,
                                     config.v_nominal, config.w_nominal,
                                     camera_z=config.camera_height)
            if choice == ROTATE_IN_PLACE:
                if rot_dir == 0.0:
                    rot_dir = 1.0 if cmd[1] >= 0.0 else -1.0
                cmd = (0.0, rot_dir * config.w_nominal)
            else:
                rot_dir = 0.0
        else:
            # losing track invalidates the plan cursor; replan on reacquire
            plan = None
            if rot_dir == 0.0:
                rot_dir = 1.0
            cmd = (0.0, rot_dir * config.w_nominal)    # rotate to reacquire
        prev = np.array([robot.x, robot.y])
        gt_pose, delta = robot.step(world, cmd, config.control_dt)
        t += config.control_dt
        moved = float(np.linalg.norm(np.array([robot.x, robot.y]) - prev))
        path_len += moved
        if abs(cmd[0]) > 0.05 and moved < 0.25 * abs(cmd[0]) * config.control_dt:
            bump_ticks = 8
            if rot_dir == 0.0:
                rot_dir = 1.0
        try:
            est = pipeline.on_odometry(delta, t)
            trajectory.append((t, est))
        except NotLocalized:
            pass
        gt_trajectory.append((t, gt_pose))

    final_dist = float(np.linalg.norm(
        np.array([robot.x, robot.y]) - goal_pos[:2]))
    return NavReport(
        success=done and final_dist <= config.goal_radius,
        time_s=t - t_start, path_length_m=path_len, goal_node=goal_node,
        goal_similarity=goal_sim, shortest_path_m=shortest,
        final_goal_dist_m=final_dist, timed_out=not done,
        trajectory=trajectory, gt_trajectory=gt_trajectory)


def run_mission(world: GridWorld, topo_map, goal_images, K: CameraIntrinsics,
                matcher, start, seed: int = 0,
                config: NavConfig = NavConfig()):
    """Sequential image goals with one robot, clock, and fusion graph."""
    robot = SimRobot(start[0], start[1], start[2],
                     camera_height=config.camera_height, seed=seed)
    pipeline = Pipeline(topo_map, K, matcher, config.pipeline)
    reports = []
    t0 = 0.0
    for goal_image in goal_images:
        rep = run_navigation(world, topo_map, goal_image, K, matcher,
                             start=None, seed=seed, config=config,
                             robot=robot, pipeline=pipeline, t_start=t0)
        reports.append(rep)
        t0 += rep.time_s
    return reports
