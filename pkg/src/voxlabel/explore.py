"""Embodied exploration: occupancy mapping, A* planning, and goal policies.

Two non-learned policies are provided: random reachable goals, and greedy
nearest-frontier exploration. Episodes are fully deterministic given a seed.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
import heapq
import math

import numpy as np

from .detector import DetectionSet, NoiseModel, simulate_detections
from .scene import (Box, CameraIntrinsics, FrameObservation, Pose, SceneSpec,
                    normalize_angle, render_frame)
from .serialize import derive_seed

UNKNOWN, FREE, OCCUPIED = 0, 1, 2

AGENT_RADIUS = 0.15


class Action(Enum):
    FORWARD = "forward"
    TURN_LEFT = "turn_left"
    TURN_RIGHT = "turn_right"


FORWARD_STEP = 0.25
TURN_STEP = math.radians(10.0)


@dataclass
class OccupancyGrid:
    """2D grid over the scene footprint; origin is the world xy of cell (0,0)."""

    cell_size: float
    cells: np.ndarray           # (rows, cols) uint8 in {UNKNOWN, FREE, OCCUPIED}
    origin: tuple               # (x, y)

    @classmethod
    def for_scene(cls, scene: SceneSpec, cell_size: float = 0.1) -> "OccupancyGrid":
        b = scene.bounds
        cols = int(math.ceil((b.xmax - b.xmin) / cell_size))
        rows = int(math.ceil((b.ymax - b.ymin) / cell_size))
        return cls(cell_size=cell_size,
                   cells=np.zeros((rows, cols), dtype=np.uint8),
                   origin=(b.xmin, b.ymin))

    def world_to_cell(self, x: float, y: float) -> tuple:
        col = int(math.floor((x - self.origin[0]) / self.cell_size))
        row = int(math.floor((y - self.origin[1]) / self.cell_size))
        return (row, col)

    def cell_center(self, cell: tuple) -> tuple:
        row, col = cell
        return (self.origin[0] + (col + 0.5) * self.cell_size,
                self.origin[1] + (row + 0.5) * self.cell_size)

    def in_bounds(self, cell: tuple) -> bool:
        return 0 <= cell[0] < self.cells.shape[0] and 0 <= cell[1] < self.cells.shape[1]

    def copy(self) -> "OccupancyGrid":
        return OccupancyGrid(self.cell_size, self.cells.copy(), self.origin)


@dataclass
class AgentState:
    pose: Pose
    step_count: int = 0


@dataclass
class Trajectory:
    """Ordered (observation, detections) pairs for steps 0..N-1."""

    frames: list    # list[FrameObservation]
    detections: list  # list[DetectionSet]

    def __len__(self):
        return len(self.frames)


def update_occupancy(grid: OccupancyGrid, frame: FrameObservation,
                     K: CameraIntrinsics, max_range: float = 10.0) -> OccupancyGrid:
    """Mark cells along each image column's nearest-return ray.

    Under the planar-depth convention every ray of a column shares the same
    horizontal track, so the column's minimum positive depth is the nearest
    obstruction along that track (this sees furniture below the horizon row,
    which a central-row-only update cannot). Cells before the hit become
    free and the hit cell occupied; columns with no return mark free out to
    max range. Mutates and returns grid.
    """
    pose = frame.pose
    right, _, forward = pose.basis()
    us = (np.arange(K.width) - K.cx) / K.fx
    # horizontal ray directions, scaled so t equals planar depth
    dx = forward[0] + us * right[0]
    dy = forward[1] + us * right[1]
    col_depth = np.where(frame.depth > 0, frame.depth, np.inf).min(axis=0)
    hit = np.isfinite(col_depth)
    depths = np.where(hit, col_depth, 0.0)
    depths[~hit] = max_range

    step = grid.cell_size * 0.5
    ts = np.arange(step, max_range + step, step)            # (T,)
    px = pose.x + ts[:, None] * dx[None, :]                 # (T, W)
    py = pose.y + ts[:, None] * dy[None, :]
    before = ts[:, None] < (depths[None, :] - 1e-9)
    cols = np.floor((px - grid.origin[0]) / grid.cell_size).astype(int)
    rows = np.floor((py - grid.origin[1]) / grid.cell_size).astype(int)
    valid = (before & (rows >= 0) & (rows < grid.cells.shape[0])
             & (cols >= 0) & (cols < grid.cells.shape[1]))
    grid.cells[rows[valid], cols[valid]] = FREE

    # occupied at the hit point itself
    hx = pose.x + depths * dx
    hy = pose.y + depths * dy
    hc = np.floor((hx - grid.origin[0]) / grid.cell_size).astype(int)
    hr = np.floor((hy - grid.origin[1]) / grid.cell_size).astype(int)
    ok = (hit & (hr >= 0) & (hr < grid.cells.shape[0])
          & (hc >= 0) & (hc < grid.cells.shape[1]))
    grid.cells[hr[ok], hc[ok]] = OCCUPIED
    return grid


def frontier_goals(grid: OccupancyGrid) -> list:
    """Representative cell per 8-connected cluster of frontier cells.

    A frontier cell is a free cell 4-adjacent to at least one unknown cell.
    The representative is the cluster centroid snapped to the nearest member.
    """
    from scipy import ndimage

    free = grid.cells == FREE
    unknown = grid.cells == UNKNOWN
    adj_unknown = np.zeros_like(unknown)
    adj_unknown[1:, :] |= unknown[:-1, :]
    adj_unknown[:-1, :] |= unknown[1:, :]
    adj_unknown[:, 1:] |= unknown[:, :-1]
    adj_unknown[:, :-1] |= unknown[:, 1:]
    frontier = free & adj_unknown
    if not frontier.any():
        return []
    labels, n = ndimage.label(frontier, structure=np.ones((3, 3), dtype=int))
    reps = []
    for k in range(1, n + 1):
        rows, cols = np.nonzero(labels == k)
        cr, cc = rows.mean(), cols.mean()
        d2 = (rows - cr) ** 2 + (cols - cc) ** 2
        # nearest member to centroid; ties by lowest (row, col)
        order = np.lexsort((cols, rows, d2))
        reps.append((int(rows[order[0]]), int(cols[order[0]])))
    reps.sort()
    return reps


def _bfs_distances(grid: OccupancyGrid, start: tuple,
                   extra_blocked=frozenset()) -> dict:
    """Shortest 4-connected path length over free cells from start."""
    if grid.cells[start] != FREE or start in extra_blocked:
        return {}
    dist = {start: 0}
    q = deque([start])
    rows, cols = grid.cells.shape
    while q:
        r, c = q.popleft()
        d = dist[(r, c)]
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if (0 <= nr < rows and 0 <= nc < cols
                    and grid.cells[nr, nc] == FREE
                    and (nr, nc) not in dist
                    and (nr, nc) not in extra_blocked):
                dist[(nr, nc)] = d + 1
                q.append((nr, nc))
    return dist


def next_goal(policy: str, grid: OccupancyGrid, agent: AgentState,
              rng: np.random.Generator, extra_blocked=frozenset()):
    """Choose the next navigation goal cell, or None when exploration is done.

    random: uniform over free cells reachable from the agent cell.
    frontier: reachable frontier cell with minimal path distance, ties broken
    by lowest (row, col).
    """
    start = grid.world_to_cell(agent.pose.x, agent.pose.y)
    if not grid.in_bounds(start):
        return None
    dist = _bfs_distances(grid, start, extra_blocked)
    if not dist:
        return None
    if policy == "random":
        candidates = sorted(dist.keys())
        if not candidates:
            return None
        idx = int(rng.integers(len(candidates)))
        return candidates[idx]
    if policy == "frontier":
        frontiers = [f for f in frontier_goals(grid) if f in dist]
        if not frontiers:
            return None
        return min(frontiers, key=lambda f: (dist[f], f[0], f[1]))
    raise ValueError(f"unknown policy: {policy}")


def plan_path(grid: OccupancyGrid, start: tuple, goal: tuple,
              extra_blocked=frozenset()):
    """A* on 4-connected free cells, unit cost, Manhattan heuristic.

    Unknown cells are untraversable. Ties broken by (f, h, row, col); the
    returned path includes both endpoints. Returns None when unreachable.
    """
    if not grid.in_bounds(start) or grid.cells[start] != FREE or start in extra_blocked:
        return None
    if not grid.in_bounds(goal) or grid.cells[goal] != FREE or goal in extra_blocked:
        return None

    def h(cell):
        return abs(cell[0] - goal[0]) + abs(cell[1] - goal[1])

    rows, cols = grid.cells.shape
    g = {start: 0}
    parent = {start: None}
    heap = [(h(start), h(start), start[0], start[1])]
    closed = set()
    while heap:
        f, _, r, c = heapq.heappop(heap)
        cur = (r, c)
        if cur in closed:
            continue
        closed.add(cur)
        if cur == goal:
            path = []
            node = goal
            while node is not None:
                path.append(node)
                node = parent[node]
            return path[::-1]
        for nxt in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if not (0 <= nxt[0] < rows and 0 <= nxt[1] < cols):
                continue
            if grid.cells[nxt] != FREE or nxt in extra_blocked or nxt in closed:
                continue
            ng = g[cur] + 1
            if ng < g.get(nxt, math.inf):
                g[nxt] = ng
                parent[nxt] = cur
                hv = h(nxt)
                heapq.heappush(heap, (ng + hv, hv, nxt[0], nxt[1]))
    return None


def _segment_blocked(scene: SceneSpec, x0, y0, x1, y1,
                     radius: float = AGENT_RADIUS) -> bool:
    """True if the swept agent disc touches any solid box or leaves the room."""
    boxes = scene.all_solid_boxes()
    n = max(2, int(math.ceil(math.hypot(x1 - x0, y1 - y0) / 0.02)) + 1)
    for i in range(n):
        t = i / (n - 1)
        x = x0 + t * (x1 - x0)
        y = y0 + t * (y1 - y0)
        b = scene.bounds
        if not (b.xmin + radius <= x <= b.xmax - radius
                and b.ymin + radius <= y <= b.ymax - radius):
            return True
        for box in boxes:
            if box.contains_xy(x, y, margin=radius):
                return True
    return False


def step_agent(scene: SceneSpec, agent: AgentState, action: Action) -> AgentState:
    """Apply one discrete action; a blocked Forward leaves the pose unchanged."""
    pose = agent.pose
    if action is Action.TURN_LEFT:
        pose = replace(pose, yaw=normalize_angle(pose.yaw + TURN_STEP))
    elif action is Action.TURN_RIGHT:
        pose = replace(pose, yaw=normalize_angle(pose.yaw - TURN_STEP))
    else:
        nx = pose.x + FORWARD_STEP * math.cos(pose.yaw)
        ny = pose.y + FORWARD_STEP * math.sin(pose.yaw)
        if not _segment_blocked(scene, pose.x, pose.y, nx, ny):
            pose = replace(pose, x=nx, y=ny)
    return AgentState(pose=pose, step_count=agent.step_count + 1)


def sample_start_pose(scene: SceneSpec, rng: np.random.Generator,
                      camera_height: float = 1.25, max_tries: int = 500) -> Pose:
    b = scene.bounds
    for _ in range(max_tries):
        x = float(rng.uniform(b.xmin, b.xmax))
        y = float(rng.uniform(b.ymin, b.ymax))
        if not _segment_blocked(scene, x, y, x, y):
            yaw = float(rng.uniform(-math.pi, math.pi))
            return Pose(x=x, y=y, yaw=yaw, camera_height=camera_height)
    raise ValueError("no valid start pose")


class _Navigator:
    """Tracks the active goal and converts the planned cell path into actions."""

    def __init__(self, grid: OccupancyGrid):
        self.grid = grid
        self.goal = None
        self.path = []
        self.waypoint_idx = 0
        self.blocked_cells: set = set()

    def clear(self):
        self.goal = None
        self.path = []
        self.waypoint_idx = 0

    def next_action(self, agent: AgentState) -> Action | None:
        """Action toward the current waypoint, or None when the path is done."""
        pose = agent.pose
        while self.waypoint_idx < len(self.path):
            wx, wy = self.grid.cell_center(self.path[self.waypoint_idx])
            if math.hypot(wx - pose.x, wy - pose.y) < 0.15:
                self.waypoint_idx += 1
                continue
            break
        if self.waypoint_idx >= len(self.path):
            return None
        # steer at the farthest waypoint within one forward step
        target_idx = self.waypoint_idx
        for j in range(self.waypoint_idx, len(self.path)):
            wx, wy = self.grid.cell_center(self.path[j])
            if math.hypot(wx - pose.x, wy - pose.y) <= FORWARD_STEP + 0.05:
                target_idx = j
            else:
                break
        wx, wy = self.grid.cell_center(self.path[target_idx])
        bearing = math.atan2(wy - pose.y, wx - pose.x)
        err = normalize_angle(bearing - pose.yaw)
        if abs(err) > TURN_STEP * 0.75:
            return Action.TURN_LEFT if err > 0 else Action.TURN_RIGHT
        return Action.FORWARD


def run_episode(scene: SceneSpec, policy: str, noise: NoiseModel, n_steps: int,
                K: CameraIntrinsics, seed: int, cell_size: float = 0.1,
                camera_height: float = 1.25, max_range: float = 10.0):
    """Sense / detect / map / plan / act loop; returns (Trajectory, OccupancyGrid).

    When the agent collides with unseen geometry, the cell ahead is added to a
    planner-only blocked set (the occupancy grid itself stays sensor-driven).
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    pose_rng = np.random.default_rng(derive_seed(seed, "start_pose"))
    goal_rng = np.random.default_rng(derive_seed(seed, "goals"))

    pose = sample_start_pose(scene, pose_rng, camera_height=camera_height)
    agent = AgentState(pose=pose, step_count=0)
    grid = OccupancyGrid.for_scene(scene, cell_size=cell_size)
    nav = _Navigator(grid)

    frames: list[FrameObservation] = []
    dets: list[DetectionSet] = []

    for step in range(n_steps):
        frame = render_frame(scene, agent.pose, K, max_range=max_range)
        det_rng = np.random.default_rng(derive_seed(seed, "detector", step))
        det = simulate_detections(frame, scene, noise, det_rng, frame_index=step)
        frames.append(frame)
        dets.append(det)
        update_occupancy(grid, frame, K, max_range=max_range)

        if step == n_steps - 1:
            break

        action = None
        for _ in range(3):  # goal selection, with one replan retry
            if nav.goal is not None:
                action = nav.next_action(agent)
                if action is not None:
                    break
                nav.clear()  # goal reached
            goal = next_goal(policy, grid, agent, goal_rng,
                             extra_blocked=frozenset(nav.blocked_cells))
            if goal is None and policy == "frontier":
                # map fully explored: patrol random reachable goals so the
                # remaining budget keeps collecting object views
                goal = next_goal("random", grid, agent, goal_rng,
                                 extra_blocked=frozenset(nav.blocked_cells))
            if goal is None:
                break
            start = grid.world_to_cell(agent.pose.x, agent.pose.y)
            path = plan_path(grid, start, goal,
                             extra_blocked=frozenset(nav.blocked_cells))
            if path is None:
                nav.clear()
                continue
            nav.goal = goal
            nav.path = path
            nav.waypoint_idx = 0
        if action is None:
            action = Action.TURN_LEFT  # exploration done or no plan: keep scanning

        before = (agent.pose.x, agent.pose.y)
        agent = step_agent(scene, agent, action)
        if action is Action.FORWARD and (agent.pose.x, agent.pose.y) == before:
            # collision with geometry the occupancy map cannot see
            ahead = grid.world_to_cell(
                agent.pose.x + FORWARD_STEP * math.cos(agent.pose.yaw),
                agent.pose.y + FORWARD_STEP * math.sin(agent.pose.yaw))
            nav.blocked_cells.add(ahead)
            near = grid.world_to_cell(
                agent.pose.x + (FORWARD_STEP / 2) * math.cos(agent.pose.yaw),
                agent.pose.y + (FORWARD_STEP / 2) * math.sin(agent.pose.yaw))
            if near != grid.world_to_cell(agent.pose.x, agent.pose.y):
                nav.blocked_cells.add(near)
            nav.clear()

    return Trajectory(frames=frames, detections=dets), grid
