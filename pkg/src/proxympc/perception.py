"""Perception: an ensemble mapping frames to latent-observation Gaussians.

Each member owns a fixed random feature map (block-average pools plus
sinusoidal random patch projections for images; random Fourier features
for flat inputs) with a ridge-regressed mean head and log-variance head,
trained on an independent bootstrap resample.  Members are combined by
Gaussian-mixture moment matching, so the reported variance is the mean
member variance plus the spread of member means; that spread is what
rises on inputs far from the training distribution.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .simple_models import observe

R_FLOOR = 1e-4
# E[log chi^2_1] = psi(1/2) + log 2; regressing log squared residuals
# underestimates log-variance by this constant
LOG_CHI2_BIAS = 1.2703628454614782


@dataclass
class LatentObservation:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.std = np.asarray(self.std, dtype=float)


def sample_observation(obs: LatentObservation, rng) -> np.ndarray:
    """Reparameterized draw mean + std * eps (eps standard normal)."""
    return obs.mean + obs.std * rng.standard_normal(obs.mean.shape)


@dataclass
class EnsembleConfig:
    members: int = 10
    sin_features: int = 512
    pool_grid: int = 16
    thresholds: tuple = (0.0, 0.45, 0.7, 0.93)
    threshold_jitter: float = 0.02
    gamma_range: tuple = (2.0, 16.0)
    patch_sizes: tuple = (8, 12, 16, 24)
    ridge: float = 3e-3
    var_floor: float = R_FLOOR
    seed: int = 0


class _FeatureMap:
    """Fixed random features for one member; image-aware when shape is given.

    Image features: the frame is passed through a bank of shifted ReLUs
    (thresholds jittered per member) that isolate the scene's brightness
    classes, and each thresholded map is reduced to row/column intensity
    profiles and a block-average pool grid.  Random sinusoidal patch
    projections of the raw frame are appended.  Flat inputs get the raw
    vector plus random Fourier features.
    """

    def __init__(self, input_dim, image_shape, cfg: EnsembleConfig, seed):
        self.input_dim = input_dim
        self.image_shape = image_shape
        rng = np.random.default_rng(seed)
        if image_shape is None:
            self._build_flat(rng, cfg)
        else:
            self._build_image(rng, cfg)

    def _build_flat(self, rng, cfg):
        d = self.input_dim
        n_sin = cfg.sin_features
        self.w = rng.standard_normal((d, n_sin)) / np.sqrt(d)
        self.gamma = np.exp(rng.uniform(np.log(0.5), np.log(4.0), size=n_sin))
        self.bias = rng.uniform(0, 2 * np.pi, size=n_sin)
        self.lin_matrix = None
        self.dim = 1 + d + n_sin

    def _build_image(self, rng, cfg):
        h, w = self.image_shape[:2]
        channels = 1 if len(self.image_shape) == 2 else self.image_shape[2]
        grid = cfg.pool_grid

        self.thresholds = (np.asarray(cfg.thresholds)
                           + rng.uniform(-cfg.threshold_jitter,
                                         cfg.threshold_jitter,
                                         size=len(cfg.thresholds)))
        self.thresholds = np.clip(self.thresholds, 0.0, 0.98)

        rows, cols, vals = [], [], []
        col = 0

        def add_block(ii, jj, c, weight):
            nonlocal col
            flat = (np.ravel(ii) * w + np.ravel(jj)) * channels + c
            rows.extend(flat)
            if np.isscalar(weight):
                vals.extend([weight] * flat.size)
            else:
                vals.extend(np.ravel(weight))
            cols.extend([col] * flat.size)
            col += 1

        for c in range(channels):
            for i in range(h):                     # row profiles
                add_block(np.full(w, i), np.arange(w), c, 1.0)
            for j in range(w):                     # column profiles
                add_block(np.arange(h), np.full(h, j), c, 1.0)
            bh, bw = h // grid, w // grid          # block-average pool
            for gi in range(grid):
                for gj in range(grid):
                    ii, jj = np.meshgrid(np.arange(gi * bh, (gi + 1) * bh),
                                         np.arange(gj * bw, (gj + 1) * bw),
                                         indexing="ij")
                    add_block(ii, jj, c, 1.0)
        self.lin_matrix = sparse.csr_matrix(
            (vals, (rows, cols)), shape=(self.input_dim, col))
        self.n_lin = col

        n_sin = cfg.sin_features
        gamma = np.exp(rng.uniform(np.log(cfg.gamma_range[0]),
                                   np.log(cfg.gamma_range[1]), size=n_sin))
        self.bias = rng.uniform(0, 2 * np.pi, size=n_sin)
        rows, cols, vals = [], [], []
        for j in range(n_sin):
            ps = int(rng.choice(cfg.patch_sizes))
            c = int(rng.integers(channels))
            top = int(rng.integers(0, h - ps + 1))
            left = int(rng.integers(0, w - ps + 1))
            wts = rng.standard_normal((ps, ps))
            wts /= np.linalg.norm(wts)
            ii, jj = np.meshgrid(np.arange(top, top + ps),
                                 np.arange(left, left + ps), indexing="ij")
            flat = (np.ravel(ii) * w + np.ravel(jj)) * channels + c
            rows.extend(flat)
            cols.extend([j] * flat.size)
            vals.extend(np.ravel(gamma[j] * wts))
        self.sin_matrix = sparse.csr_matrix(
            (vals, (rows, cols)), shape=(self.input_dim, n_sin))
        self.dim = 1 + self.n_lin * len(self.thresholds) + n_sin

    def __call__(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        ones = np.ones((X.shape[0], 1))
        if self.lin_matrix is None:
            proj = X @ self.w
            sin = np.cos(proj * self.gamma + self.bias)
            return np.concatenate([ones, X, sin], axis=1)
        parts = [ones]
        for tau in self.thresholds:
            parts.append(np.maximum(X - tau, 0.0) @ self.lin_matrix)
        parts.append(np.cos(X @ self.sin_matrix + self.bias))
        return np.concatenate(parts, axis=1)


@dataclass
class _Member:
    feature_seed: int
    boot_seed: int
    fmap: _FeatureMap
    w_mean: np.ndarray = None
    w_logvar: np.ndarray = None
    phi_mean: np.ndarray = None    # feature standardization from the bootstrap
    phi_std: np.ndarray = None

    def features(self, X):
        phi = self.fmap(X)
        return (phi - self.phi_mean) / self.phi_std


class Ensemble:
    """Trained perception ensemble; immutable after training."""

    def __init__(self, members, input_dim, image_shape, out_dim,
                 cfg: EnsembleConfig):
        self.members = members
        self.input_dim = input_dim
        self.image_shape = image_shape
        self.out_dim = out_dim
        self.cfg = cfg

    def predict(self, frame) -> LatentObservation:
        return self.predict_batch(np.asarray(frame, dtype=float).reshape(1, -1))[0]

    def predict_batch(self, X):
        """Mixture-moment combination of member Gaussians, variance floored."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        mus = np.empty((len(self.members), X.shape[0], self.out_dim))
        vs = np.empty_like(mus)
        for k, mem in enumerate(self.members):
            phi = mem.features(X)
            mus[k] = phi @ mem.w_mean
            logv = np.clip(phi @ mem.w_logvar + LOG_CHI2_BIAS, -20.0, 6.0)
            vs[k] = np.exp(logv)
        mu = mus.mean(axis=0)
        var = (vs + mus ** 2).mean(axis=0) - mu ** 2
        var = np.maximum(var, self.cfg.var_floor)
        return [LatentObservation(m, np.sqrt(v)) for m, v in zip(mu, var)]

    def save(self, path):
        data = {
            "format_version": np.array([1]),
            "input_dim": np.array([self.input_dim]),
            "out_dim": np.array([self.out_dim]),
            "image_shape": np.array(self.image_shape if self.image_shape else [],
                                    dtype=int),
            "members": np.array([len(self.members)]),
            "cfg_members": np.array([self.cfg.members]),
            "cfg_sin": np.array([self.cfg.sin_features]),
            "cfg_pool": np.array([self.cfg.pool_grid]),
            "cfg_thresholds": np.array(self.cfg.thresholds),
            "cfg_tjitter": np.array([self.cfg.threshold_jitter]),
            "cfg_gamma": np.array(self.cfg.gamma_range),
            "cfg_patches": np.array(self.cfg.patch_sizes),
            "cfg_ridge": np.array([self.cfg.ridge]),
            "cfg_floor": np.array([self.cfg.var_floor]),
            "cfg_seed": np.array([self.cfg.seed]),
        }
        for k, mem in enumerate(self.members):
            data[f"m{k}_feature_seed"] = np.array([mem.feature_seed])
            data[f"m{k}_boot_seed"] = np.array([mem.boot_seed])
            data[f"m{k}_w_mean"] = mem.w_mean
            data[f"m{k}_w_logvar"] = mem.w_logvar
            data[f"m{k}_phi_mean"] = mem.phi_mean
            data[f"m{k}_phi_std"] = mem.phi_std
        np.savez(path, **data)

    @classmethod
    def load(cls, path):
        with np.load(path) as f:
            if int(f["format_version"][0]) != 1:
                raise ValueError(f"unsupported ensemble checkpoint version in {path}")
            cfg = EnsembleConfig(
                members=int(f["cfg_members"][0]),
                sin_features=int(f["cfg_sin"][0]),
                pool_grid=int(f["cfg_pool"][0]),
                thresholds=tuple(f["cfg_thresholds"]),
                threshold_jitter=float(f["cfg_tjitter"][0]),
                gamma_range=tuple(f["cfg_gamma"]),
                patch_sizes=tuple(int(p) for p in f["cfg_patches"]),
                ridge=float(f["cfg_ridge"][0]),
                var_floor=float(f["cfg_floor"][0]),
                seed=int(f["cfg_seed"][0]))
            input_dim = int(f["input_dim"][0])
            out_dim = int(f["out_dim"][0])
            shape = tuple(int(v) for v in f["image_shape"])
            image_shape = shape if shape else None
            members = []
            for k in range(int(f["members"][0])):
                seed = int(f[f"m{k}_feature_seed"][0])
                mem = _Member(feature_seed=seed, boot_seed=int(f[f"m{k}_boot_seed"][0]),
                              fmap=_FeatureMap(input_dim, image_shape, cfg, seed),
                              w_mean=f[f"m{k}_w_mean"].copy(),
                              w_logvar=f[f"m{k}_w_logvar"].copy(),
                              phi_mean=f[f"m{k}_phi_mean"].copy(),
                              phi_std=f[f"m{k}_phi_std"].copy())
                members.append(mem)
        return cls(members, input_dim, image_shape, out_dim, cfg)


def _ridge_fit(phi, Y, lam):
    A = phi.T @ phi
    A[np.diag_indices_from(A)] += lam * phi.shape[0]
    return np.linalg.solve(A, phi.T @ Y)


def _fit_member(fmap, X, Y, boot, cfg, chunk=2048):
    """Ridge fits on a float32 feature matrix built chunk by chunk."""
    n = len(boot)
    phi = np.empty((n, fmap.dim), dtype=np.float32)
    for lo in range(0, n, chunk):
        phi[lo:lo + chunk] = fmap(X[boot[lo:lo + chunk]])
    phi_mean = phi.mean(axis=0, dtype=np.float64)
    phi_std = np.maximum(phi.std(axis=0, dtype=np.float64), 1e-8)
    phi_mean[0], phi_std[0] = 0.0, 1.0          # keep the bias column intact
    phi -= phi_mean.astype(np.float32)
    phi /= phi_std.astype(np.float32)

    A = (phi.T @ phi).astype(np.float64)
    A[np.diag_indices_from(A)] += cfg.ridge * n
    chol = np.linalg.cholesky(A)
    yb = Y[boot]
    w_mean = _chol_solve(chol, (phi.T @ yb.astype(np.float32)).astype(np.float64))
    resid2 = (yb - phi @ w_mean.astype(np.float32)) ** 2
    log_t = np.log(resid2 + cfg.var_floor).astype(np.float32)
    w_logvar = _chol_solve(chol, (phi.T @ log_t).astype(np.float64))
    return w_mean, w_logvar, phi_mean, phi_std


def _chol_solve(chol, rhs):
    from scipy.linalg import solve_triangular

    return solve_triangular(chol.T, solve_triangular(chol, rhs, lower=True),
                            lower=False)


def train_ensemble(X, Y, image_shape=None, cfg: EnsembleConfig | None = None
                   ) -> Ensemble:
    """Fit the ensemble on inputs X (N, D) and targets Y (N, m).

    Each member gets its own feature seed and bootstrap resample; the mean
    head is ridge regression, the log-variance head is ridge regression of
    de-biased log squared residuals on the same features.
    """
    cfg = cfg or EnsembleConfig()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n, d = X.shape
    root = np.random.default_rng(cfg.seed)
    members = []
    for k in range(cfg.members):
        feature_seed = int(root.integers(2 ** 31))
        boot_seed = int(root.integers(2 ** 31))
        fmap = _FeatureMap(d, image_shape, cfg, feature_seed)
        if n < fmap.dim:
            warnings.warn(
                f"training set size {n} is below the feature dimension {fmap.dim}")
        boot = np.random.default_rng(boot_seed).integers(0, n, size=n)
        w_mean, w_logvar, phi_mean, phi_std = _fit_member(fmap, X, Y, boot, cfg)
        members.append(_Member(feature_seed, boot_seed, fmap, w_mean, w_logvar,
                               phi_mean, phi_std))
    return Ensemble(members, d, image_shape, Y.shape[1], cfg)


# ---------------------------------------------------------------------------
# simple-system data generation


@dataclass
class TrainingSet:
    inputs: np.ndarray       # (N, D) flattened frames
    targets: np.ndarray      # (N, m)
    image_shape: tuple

    def __len__(self):
        return len(self.inputs)


def collect_data(model, params_sampler, start_sampler, frame_fn, n_traj,
                 horizon, rand, seed) -> TrainingSet:
    """Roll out the proxy model with uniform random actions and render.

    Appearance and dynamic parameters are resampled per trajectory; every
    produced pair satisfies target == observe(state) by construction.
    """
    if n_traj < 1 or horizon < 1:
        raise ValueError("n_traj and horizon must be >= 1")
    rng = np.random.default_rng(seed)
    inputs, targets = [], []
    image_shape = None
    for _ in range(n_traj):
        params = params_sampler(rng)
        z = start_sampler(rng)
        appearance_rng = np.random.default_rng(rng.integers(2 ** 31))
        frame_ctx = frame_fn(rng)          # per-trajectory appearance closure
        for _ in range(horizon):
            frame = frame_ctx(z, appearance_rng)
            if image_shape is None:
                image_shape = frame.shape
            inputs.append(frame.reshape(-1))
            targets.append(observe(z, model.obs_map))
            u = model.bounds.sample(rng)
            z = model.step(z, u, params)
    return TrainingSet(np.array(inputs), np.array(targets), tuple(image_shape))


def collect_cartpole_data(n_traj, horizon, rand, seed, dt=0.05) -> TrainingSet:
    """Domain-randomized cart-pole frames with exact latent observations."""
    from .render import render_tethered, sample_tethered_appearance
    from .simple_models import CartPoleParams, make_cartpole_model

    model = make_cartpole_model(dt=dt)

    def params_sampler(rng):
        return CartPoleParams(mass_cart=rng.uniform(0.7, 1.5),
                              mass_pole=rng.uniform(0.1, 0.5),
                              angular_damping=rng.uniform(0.01, 0.2))

    def start_sampler(rng):
        length = rng.uniform(*rand.length_range)
        theta = rng.uniform(-np.pi, np.pi)
        x = rng.uniform(-0.7, 0.7)
        return np.array([x, x + length * np.sin(theta), -length * np.cos(theta),
                         rng.uniform(-0.5, 0.5), rng.uniform(-2.0, 2.0)])

    def frame_fn(rng):
        app = sample_tethered_appearance(rand, rng)

        def draw(z, noise_rng):
            pivot = np.array([z[0], 0.0])
            mass = z[1:3]
            return render_tethered(np.array([pivot, mass]), mass, z[0], app,
                                   noise_rng)
        return draw

    return collect_data(model, params_sampler, start_sampler, frame_fn,
                        n_traj, horizon, rand, seed)


def collect_link_data(n_traj, horizon, rand, seed) -> TrainingSet:
    """Domain-randomized rigid-link frames over random box obstacles."""
    from .render import render_rope, sample_rope_appearance, sample_rope_obstacles
    from .simple_models import make_rigidlink_model

    model = make_rigidlink_model()

    def params_sampler(rng):
        return None

    def start_sampler(rng):
        length = rng.uniform(0.5, 1.1)
        center = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5),
                           rng.uniform(0.15, 0.85)])
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        return np.concatenate([center - 0.5 * length * direction,
                               center + 0.5 * length * direction])

    def frame_fn(rng):
        app = sample_rope_appearance(rand, rng)
        boxes = sample_rope_obstacles(rand, rng)

        def draw(z, noise_rng):
            return render_rope(z.reshape(2, 3), boxes, app, noise_rng)
        return draw

    return collect_data(model, params_sampler, start_sampler, frame_fn,
                        n_traj, horizon, rand, seed)


def save_training_set(ts: TrainingSet, out_dir):
    """Frames as PGM (plus raw float32 depth) files with a CSV target index."""
    import csv
    import os

    from .render import write_depth, write_pgm

    os.makedirs(out_dir, exist_ok=True)
    has_depth = len(ts.image_shape) == 3 and ts.image_shape[2] == 2
    with open(os.path.join(out_dir, "index.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame", "depth" if has_depth else ""]
                        + [f"y{i}" for i in range(ts.targets.shape[1])])
        for i, (x, y) in enumerate(zip(ts.inputs, ts.targets)):
            frame = x.reshape(ts.image_shape)
            name = f"frame_{i:06d}.pgm"
            if has_depth:
                write_pgm(os.path.join(out_dir, name), frame[..., 0])
                dname = f"frame_{i:06d}.depth.f32"
                write_depth(os.path.join(out_dir, dname), frame[..., 1])
            else:
                write_pgm(os.path.join(out_dir, name), frame)
                dname = ""
            writer.writerow([name, dname] + [repr(v) for v in y])
    np.savez(os.path.join(out_dir, "arrays.npz"),
             format_version=np.array([1]), inputs=ts.inputs, targets=ts.targets,
             image_shape=np.array(ts.image_shape))


def load_training_set(out_dir) -> TrainingSet:
    import os

    with np.load(os.path.join(out_dir, "arrays.npz")) as f:
        if int(f["format_version"][0]) != 1:
            raise ValueError("unsupported training-set version")
        return TrainingSet(f["inputs"].copy(), f["targets"].copy(),
                           tuple(int(v) for v in f["image_shape"]))
