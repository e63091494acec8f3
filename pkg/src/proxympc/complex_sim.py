"""Ground-truth systems: a tethered mass chain (2D) and a rope chain (3D).

The tethered chain hangs from a force-driven cart on a horizontal rail and
is integrated with semi-implicit Euler plus an exact Newton/KKT projection
of the distance constraints each substep (the constraint system of a chain
is a small tridiagonal solve, so projecting to machine precision is cheap).

The rope has two kinematically driven endpoint grippers and axis-aligned
box obstacles it can snag on; it uses position-based dynamics with
red-black Gauss-Seidel sweeps plus box push-out, iterated to tolerance.

All core steppers operate on a leading batch dimension so that large
randomized-property sweeps can run many scenes in lockstep.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .simple_models import GRAVITY


# ---------------------------------------------------------------------------
# tethered mass chain


@dataclass
class ChainConfig:
    n_links: int = 5
    total_length: float = 0.8
    link_mass: float = 0.06
    tip_mass: float = 0.3
    cart_mass: float = 1.0
    rail_y: float = 0.0
    substeps: int = 20
    newton_iters: int = 4
    newton_tol: float = 1e-12


@dataclass
class ChainState:
    """Node 0 is the cart (constrained to the rail); the last node is the mass."""

    nodes: np.ndarray        # (N+1, 2) positions
    vel: np.ndarray          # (N+1, 2)
    seg_lengths: np.ndarray  # (N,)

    def copy(self):
        return ChainState(self.nodes.copy(), self.vel.copy(), self.seg_lengths.copy())

    @property
    def cart_x(self):
        return self.nodes[0, 0]

    @property
    def mass_pos(self):
        return self.nodes[-1]


def make_chain(cfg: ChainConfig, cart_x: float = 0.0, theta: float = 0.0) -> ChainState:
    """Straight chain hanging from the cart at angle ``theta`` from vertical."""
    n = cfg.n_links
    seg = np.full(n, cfg.total_length / n)
    direction = np.array([np.sin(theta), -np.cos(theta)])
    nodes = np.zeros((n + 1, 2))
    nodes[0] = [cart_x, cfg.rail_y]
    for i in range(1, n + 1):
        nodes[i] = nodes[0] + direction * seg[0] * i
    return ChainState(nodes, np.zeros((n + 1, 2)), seg)


def _chain_inv_masses(cfg: ChainConfig):
    n = cfg.n_links
    w = np.empty((n + 1, 2))
    w[0] = [1.0 / cfg.cart_mass, 0.0]          # cart moves only along the rail
    if n > 1:
        w[1:n] = 1.0 / cfg.link_mass
    w[n] = 1.0 / cfg.tip_mass
    return w


def _chain_project(nodes, w, seg_lengths, iters, tol):
    """Exact distance-constraint projection via Newton on the multipliers.

    nodes (B, K, 2) is modified in place; the mass-weighted KKT system of a
    chain is tridiagonal, solved densely per batch row (K is small).
    """
    B, K, _ = nodes.shape
    n = K - 1
    for _ in range(iters):
        d = nodes[:, 1:] - nodes[:, :-1]                 # (B, n, 2)
        dist = np.linalg.norm(d, axis=2)
        dist = np.maximum(dist, 1e-12)
        c = dist - seg_lengths
        if np.max(np.abs(c)) < tol:
            break
        nhat = d / dist[..., None]
        wa = np.einsum("bij,bij->bi", nhat * w[None, :-1, :], nhat)
        wb = np.einsum("bij,bij->bi", nhat * w[None, 1:, :], nhat)
        A = np.zeros((B, n, n))
        idx = np.arange(n)
        A[:, idx, idx] = wa + wb
        if n > 1:
            cross = -np.einsum("bij,bij->bi", nhat[:, :-1] * w[None, 1:n, :],
                               nhat[:, 1:])
            A[:, idx[:-1], idx[:-1] + 1] = cross
            A[:, idx[:-1] + 1, idx[:-1]] = cross
        lam = np.linalg.solve(A, -c[..., None])[..., 0]   # (B, n)
        grad = np.zeros_like(nodes)
        contrib = nhat * lam[..., None]
        grad[:, :-1] -= contrib
        grad[:, 1:] += contrib
        nodes += w[None] * grad
    return nodes


def chain_step(state: ChainState, u, dt: float, cfg: ChainConfig) -> ChainState:
    """Advance one chain by dt under cart force u."""
    nodes, vel = chain_step_batch(state.nodes[None], state.vel[None],
                                  state.seg_lengths,
                                  np.array([float(np.asarray(u).reshape(-1)[0])]),
                                  dt, cfg)
    return ChainState(nodes[0], vel[0], state.seg_lengths.copy())


def chain_step_batch(nodes, vel, seg_lengths, forces, dt, cfg: ChainConfig):
    """Batched chain step: nodes/vel (B, K, 2), forces (B,)."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    w = _chain_inv_masses(cfg)
    nodes, vel = nodes.copy(), vel.copy()
    h = dt / cfg.substeps
    for _ in range(cfg.substeps):
        prev = nodes.copy()
        vel[:, 1:, 1] -= GRAVITY * h
        vel[:, 0, 0] += forces / cfg.cart_mass * h
        vel[:, 0, 1] = 0.0
        nodes = nodes + vel * h
        _chain_project(nodes, w, seg_lengths, cfg.newton_iters, cfg.newton_tol)
        vel = (nodes - prev) / h
    return nodes, vel


def segment_lengths_error(nodes, seg_lengths):
    d = np.linalg.norm(np.diff(nodes, axis=-2), axis=-1)
    return float(np.max(np.abs(d - seg_lengths)))


# ---------------------------------------------------------------------------
# collision / goal tests for the tethered task


@dataclass
class TetheredTask:
    target: np.ndarray = field(default_factory=lambda: np.array([0.5, -0.4]))
    radius: float = 0.1

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=float)


def point_segment_distance(p, a, b):
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0 else np.clip((p - a) @ ab / denom, 0.0, 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


def check_failure(state: ChainState, task: TetheredTask) -> bool:
    """Tether-target contact: any tether segment meets the closed target disc.

    The final segment (the one carrying the mass) is excluded, so reaching
    the goal with the mass itself is not a contact.
    """
    nodes = state.nodes
    for i in range(len(nodes) - 2):
        if point_segment_distance(task.target, nodes[i], nodes[i + 1]) <= task.radius:
            return True
    return False


def check_goal_tethered(state: ChainState, task: TetheredTask) -> bool:
    at_target = np.linalg.norm(state.mass_pos - task.target) <= task.radius
    return bool(at_target and not check_failure(state, task))


# ---------------------------------------------------------------------------
# rope chain with box obstacles


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if np.any(self.lo >= self.hi):
            raise ValueError("box must have positive extent")

    def contains(self, pts):
        pts = np.atleast_2d(pts)
        return np.all((pts > self.lo) & (pts < self.hi), axis=-1)


@dataclass
class RopeConfig:
    n_nodes: int = 11
    length: float = 1.0
    node_mass: float = 0.02
    gravity: float = GRAVITY
    substeps: int = 10
    min_iterations: int = 4
    max_iterations: int = 150
    tolerance: float = 2e-8        # final-substep segment-length target
    loose_tolerance: float = 1e-5  # intermediate-substep target
    loose_cap: int = 40
    omega: float = 1.5             # over-relaxation on distance corrections
    max_separation: float = 0.99   # gripper distance cap, fraction of length
    workspace_lo: np.ndarray = field(
        default_factory=lambda: np.array([-1.0, -1.0, 0.02]))
    workspace_hi: np.ndarray = field(
        default_factory=lambda: np.array([1.0, 1.0, 1.0]))


@dataclass
class RopeScene:
    nodes: np.ndarray        # (N, 3); nodes 0 and -1 are the grippers
    vel: np.ndarray
    seg_lengths: np.ndarray  # (N-1,)
    obstacles: list
    goal_center: np.ndarray
    goal_radius: float

    def copy(self):
        return RopeScene(self.nodes.copy(), self.vel.copy(), self.seg_lengths.copy(),
                         list(self.obstacles), self.goal_center.copy(),
                         self.goal_radius)

    @property
    def grippers(self):
        return self.nodes[0].copy(), self.nodes[-1].copy()


def rope_midpoint(nodes):
    """Middle node for odd node counts, mean of the two middle nodes for even."""
    n = nodes.shape[-2]
    if n % 2 == 1:
        return nodes[..., n // 2, :].copy()
    return 0.5 * (nodes[..., n // 2 - 1, :] + nodes[..., n // 2, :])


def check_goal_rope(scene: RopeScene) -> bool:
    mid = rope_midpoint(scene.nodes)
    return bool(np.linalg.norm(mid - scene.goal_center) <= scene.goal_radius)


def _project_rope_segments(nodes, w, seg_lengths, subset, omega=1.0):
    """PBD distance projection on a disjoint segment subset; batched."""
    a, b = subset, subset + 1
    d = nodes[:, b] - nodes[:, a]
    dist = np.linalg.norm(d, axis=2)
    dist = np.maximum(dist, 1e-12)
    nhat = d / dist[..., None]
    denom = w[a] + w[b]
    lam = omega * (dist - seg_lengths[subset]) / denom
    corr = nhat * lam[..., None]
    nodes[:, a] += w[a, None] * corr
    nodes[:, b] -= w[b, None] * corr


def _project_long_range(nodes, cum_from_l, cum_from_r):
    """Long-range attachment caps: node i stays within rope-arc reach of each
    gripper.  Inactive for slack configurations; makes taut ropes converge in
    a couple of sweeps instead of diffusing corrections node by node.
    """
    for g_idx, caps in ((0, cum_from_l), (-1, cum_from_r)):
        g = nodes[:, g_idx][:, None, :]
        d = nodes[:, 1:-1] - g
        dist = np.linalg.norm(d, axis=2)
        over = dist > caps
        if np.any(over):
            scale = np.where(over, caps / np.maximum(dist, 1e-12), 1.0)
            nodes[:, 1:-1] = g + d * scale[..., None]


def _push_out_of_boxes(nodes, boxes, contact_dir):
    """Project interior nodes out of boxes through the nearest face; batched.

    nodes (B, N, 3) modified in place; contact_dir (B, N, 3) accumulates the
    face normal direction (+1/-1) used, for velocity cancellation.  Returns
    the largest displacement applied.
    """
    moved = 0.0
    inner = nodes[:, 1:-1]
    for box in boxes:
        inside = box.contains(inner)                     # (B, N-2)
        if not inside.any():
            continue
        b_idx, n_idx = np.nonzero(inside)
        pts = inner[b_idx, n_idx]                        # (M, 3)
        d_lo = pts - box.lo
        d_hi = box.hi - pts
        stacked = np.concatenate([d_lo, d_hi], axis=1)   # (M, 6)
        face = np.argmin(stacked, axis=1)
        moved = max(moved, float(np.max(stacked[np.arange(len(pts)), face])))
        axis = face % 3
        is_hi = face >= 3
        new_vals = np.where(is_hi, box.hi[axis], box.lo[axis])
        pts[np.arange(len(pts)), axis] = new_vals
        inner[b_idx, n_idx] = pts
        contact_dir[b_idx, n_idx + 1, axis] = np.where(is_hi, 1.0, -1.0)
    return moved


def _push_points_out(pts, boxes):
    """Project free points (e.g. gripper targets) out of boxes, nearest face."""
    for box in boxes:
        inside = box.contains(pts)
        if not inside.any():
            continue
        idx = np.nonzero(inside)[0]
        sel = pts[idx]
        stacked = np.concatenate([sel - box.lo, box.hi - sel], axis=1)
        face = np.argmin(stacked, axis=1)
        axis = face % 3
        is_hi = face >= 3
        sel[np.arange(len(sel)), axis] = np.where(is_hi, box.hi[axis], box.lo[axis])
        pts[idx] = sel
    return pts


def _clamp_gripper_targets(p_l, p_r, cfg: RopeConfig, total_length: float,
                           obstacles):
    """Workspace clamp, obstacle push-out, and separation cap for targets."""
    p_l = np.clip(p_l, cfg.workspace_lo, cfg.workspace_hi)
    p_r = np.clip(p_r, cfg.workspace_lo, cfg.workspace_hi)
    p_l = _push_points_out(p_l, obstacles)
    p_r = _push_points_out(p_r, obstacles)
    limit = cfg.max_separation * total_length
    d = p_r - p_l
    dist = np.linalg.norm(d, axis=1, keepdims=True)
    over = dist[:, 0] > limit
    if np.any(over):
        mid = 0.5 * (p_l + p_r)
        half = 0.5 * limit * d / np.maximum(dist, 1e-12)
        p_l = np.where(over[:, None], mid - half, p_l)
        p_r = np.where(over[:, None], mid + half, p_r)
    return p_l, p_r


def rope_step(scene: RopeScene, u, dt: float, cfg: RopeConfig) -> RopeScene:
    """Advance the rope under gripper deltas u = [dpL, dpR].

    The grippers are kinematic: they move to their commanded positions
    (clamped to the workspace and the stretch limit) exactly; interior
    nodes fall under gravity and are projected to satisfy segment lengths
    and stay outside obstacles.  A node pushed out of a box loses the
    velocity component into the face it exited from.
    """
    nodes, vel = rope_step_batch(scene.nodes[None], scene.vel[None],
                                 scene.seg_lengths,
                                 np.asarray(u, dtype=float).reshape(1, 6),
                                 dt, cfg, scene.obstacles)
    return RopeScene(nodes[0], vel[0], scene.seg_lengths.copy(),
                     list(scene.obstacles), scene.goal_center.copy(),
                     scene.goal_radius)


def rope_step_batch(nodes, vel, seg_lengths, u, dt, cfg: RopeConfig, obstacles):
    """Batched rope step: nodes/vel (B, N, 3), u (B, 6)."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    B, n, _ = nodes.shape
    total = float(np.sum(seg_lengths))
    target_l, target_r = _clamp_gripper_targets(nodes[:, 0] + u[:, :3],
                                                nodes[:, -1] + u[:, 3:], cfg, total,
                                                obstacles)
    w = np.ones(n) / cfg.node_mass
    w[0] = 0.0
    w[-1] = 0.0
    even = np.arange(0, n - 1, 2)
    odd = np.arange(1, n - 1, 2)
    cum = np.cumsum(seg_lengths)
    cum_from_l = cum[:-1]                  # arc reach of node i from the left
    cum_from_r = cum[-1] - cum[:-1]        # and from the right gripper
    nodes, vel = nodes.copy(), vel.copy()
    h = dt / cfg.substeps
    step_l = (target_l - nodes[:, 0]) / cfg.substeps
    step_r = (target_r - nodes[:, -1]) / cfg.substeps

    def row_err(nds):
        d = np.linalg.norm(np.diff(nds, axis=1), axis=2)
        return np.max(np.abs(d - seg_lengths), axis=1)

    def solve(nds, cdir, tol, cap):
        for k in range(cap):
            if k % 4 == 0:
                _project_long_range(nds, cum_from_l, cum_from_r)
            _project_rope_segments(nds, w, seg_lengths, even, cfg.omega)
            if odd.size:
                _project_rope_segments(nds, w, seg_lengths, odd, cfg.omega)
            pushed = _push_out_of_boxes(nds, obstacles, cdir)
            if (k >= cfg.min_iterations and pushed < 0.1 * tol
                    and segment_lengths_error(nds, seg_lengths) < tol):
                break
        _push_out_of_boxes(nds, obstacles, cdir)
        return row_err(nds)

    contact_dir = np.zeros_like(nodes)
    for s in range(cfg.substeps):
        final = s == cfg.substeps - 1
        tol = cfg.tolerance if final else cfg.loose_tolerance
        cap = cfg.max_iterations if final else cfg.loose_cap
        prev = nodes.copy()
        vel[:, 1:-1, 2] -= cfg.gravity * h
        nodes[:, 1:-1] += vel[:, 1:-1] * h
        # scale gripper motion back (per scene) when it makes the constraints
        # infeasible: an inextensible rope wrapped on an obstacle stops the arms
        scale = np.ones(B)
        for attempt in range(7):
            trial = nodes.copy()
            trial_dir = np.zeros_like(nodes)
            trial[:, 0] += scale[:, None] * step_l
            trial[:, -1] += scale[:, None] * step_r
            err = solve(trial, trial_dir, tol, cap)
            bad = err > 10 * tol
            if not bad.any() or attempt == 6:
                nodes = trial
                contact_dir = trial_dir
                break
            scale = np.where(bad, scale * (0.0 if attempt == 5 else 0.5), scale)
        vel = (nodes - prev) / h
        inward = contact_dir * vel < 0.0
        vel = np.where((contact_dir != 0.0) & inward, 0.0, vel)
    return nodes, vel


def make_rope(cfg: RopeConfig, p_l, p_r, obstacles, goal_center,
              goal_radius: float, sag: float = 0.0) -> RopeScene:
    """Rope of total length cfg.length hung between the gripper positions.

    Node positions start on the interpolating curve (optionally sagged) and
    are settled against the constraints so the scene begins consistent.
    """
    p_l = np.asarray(p_l, dtype=float)
    p_r = np.asarray(p_r, dtype=float)
    n = cfg.n_nodes
    ts = np.linspace(0.0, 1.0, n)
    nodes = (1 - ts)[:, None] * p_l + ts[:, None] * p_r
    if sag == 0.0 and np.linalg.norm(p_r - p_l) < cfg.length:
        sag = 1e-4   # break collinearity so slack can buckle downward
    nodes[:, 2] -= sag * np.sin(np.pi * ts)
    seg_lengths = np.full(n - 1, cfg.length / (n - 1))

    w = np.ones(n) / cfg.node_mass
    w[0] = 0.0
    w[-1] = 0.0
    even = np.arange(0, n - 1, 2)
    odd = np.arange(1, n - 1, 2)
    cum = np.cumsum(seg_lengths)
    nodes = nodes[None]
    contact_dir = np.zeros_like(nodes)
    for _ in range(400):
        _project_long_range(nodes, cum[:-1], cum[-1] - cum[:-1])
        _project_rope_segments(nodes, w, seg_lengths, even)
        if odd.size:
            _project_rope_segments(nodes, w, seg_lengths, odd)
        moved = _push_out_of_boxes(nodes, obstacles, contact_dir)
        if not moved and segment_lengths_error(nodes, seg_lengths) < 1e-9:
            break
    return RopeScene(nodes[0], np.zeros((n, 3)), seg_lengths, list(obstacles),
                     np.asarray(goal_center, dtype=float), goal_radius)
