"""Benchmark cases: config-driven forward rollouts, steady-state runs,
gradient-descent optimization of flow parameters, and gradient-path
ablations. Reference states for optimizations are generated in-process by
running the same case at the target parameter value."""

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import mesh
from .adjoint import GradState, GradientPath, backward_rollout
from .piso import (PisoWorkspace, StepConfig, StepTape, make_state,
                   piso_step, reichardt_init, wall_forcing_source)
from .stats import ChannelAccumulator

MESH_BUILDERS = {
    "box": mesh.make_box,
    "cavity": mesh.make_cavity,
    "poiseuille": mesh.make_poiseuille,
    "channel": mesh.make_channel,
    "backstep": mesh.make_backstep,
    "obstacle": mesh.make_obstacle_grid,
    "two_block": mesh.make_two_block,
}

OPT_TARGETS = ("scale", "lid", "nu", "source", "joint")


@dataclass
class OptimizeSpec:
    """Gradient-descent block: what to optimize and how."""
    target: str                    # one of OPT_TARGETS
    lr: float
    iterations: int
    init: object = None            # initial parameter value
    reference: object = None       # parameter generating the reference
    path: object = GradientPath.FULL
    weight_decay: float = 0.0      # L2 penalty on the parameter

    def __post_init__(self):
        if self.target not in OPT_TARGETS:
            raise ValueError(f"unknown optimization target {self.target!r}; "
                             f"choose from {OPT_TARGETS}")
        if isinstance(self.path, str):
            self.path = GradientPath.parse(self.path)
        if np.any(np.asarray(self.lr) <= 0) or self.iterations < 1 \
                or self.weight_decay < 0:
            raise ValueError("bad optimization hyperparameters")


@dataclass
class CaseConfig:
    """Complete description of a benchmark run.

    Exactly one of dt / cfl selects the time stepping, and exactly one of
    steps / horizon selects the duration. ``precision`` only affects field
    dumps (the solver itself runs in double).
    """
    name: str = "case"
    mesh: str = "box"
    mesh_args: dict = field(default_factory=dict)
    nu: float = 1.0
    source: object = None
    forcing: str = "constant"      # or "wall_shear" for driven channels
    delta: float = 1.0
    flow_axis: int = 0
    wall_axis: int = 1
    dt: float = None
    cfl: float = None
    dt_max: float = 1.25
    steps: int = None
    horizon: float = None
    n_correctors: int = 2
    nonortho_correctors: int = 0
    tol: float = None
    maxiter: int = None
    u0: str = "zero"               # "zero" | "gauss" | "reichardt"
    u0_args: dict = field(default_factory=dict)
    steady_tol: float = None       # stop when |du|_inf/dt drops below this
    stats_every: int = 0
    stats_warmup: int = 0
    precision: str = "double"
    seed: int = 0
    optimization: OptimizeSpec = None

    def validate(self):
        if self.mesh not in MESH_BUILDERS:
            raise ValueError(f"unknown mesh kind {self.mesh!r}")
        if (self.dt is None) == (self.cfl is None):
            raise ValueError("set exactly one of dt / cfl")
        if (self.steps is None) == (self.horizon is None):
            raise ValueError("set exactly one of steps / horizon")
        if self.u0 not in ("zero", "gauss", "reichardt"):
            raise ValueError(f"unknown initial condition {self.u0!r}")
        if self.forcing not in ("constant", "wall_shear"):
            raise ValueError(f"unknown forcing mode {self.forcing!r}")
        if self.precision not in ("double", "single"):
            raise ValueError("precision must be 'double' or 'single'")
        return self

    def build_mesh(self):
        return MESH_BUILDERS[self.mesh](**self.mesh_args)


def poiseuille_analytic(y, g=1.0, nu=1.0):
    """Steady duct profile u(y) = g/(2 nu) y (1 - y) on the unit channel."""
    y = np.asarray(y, dtype=np.float64)
    return g / (2.0 * nu) * y * (1.0 - y)


def gauss_profile(domain, amplitude=1.0, sigma=None, center=None,
                  component=0):
    """Gaussian bump of one velocity component; sigma defaults to an
    eighth of the domain extent along the first axis."""
    lo = domain.centers.min(axis=0)
    hi = domain.centers.max(axis=0)
    if center is None:
        center = 0.5 * (lo + hi)
    if sigma is None:
        sigma = (hi[0] - lo[0]) / 8.0
    r2 = np.sum((domain.centers - np.asarray(center)) ** 2, axis=1)
    u = np.zeros((domain.n, domain.dim))
    u[:, component] = amplitude * np.exp(-r2 / (2.0 * sigma ** 2))
    return u


def initial_state(domain, cfg):
    """State (and possibly overridden viscosity) for a configured case."""
    if cfg.u0 == "zero":
        return make_state(domain), cfg.nu
    if cfg.u0 == "gauss":
        return make_state(domain, u0=gauss_profile(domain, **cfg.u0_args)), \
            cfg.nu
    args = dict(cfg.u0_args)
    args.setdefault("delta", cfg.delta)
    args.setdefault("wall_axis", cfg.wall_axis)
    args.setdefault("flow_axis", cfg.flow_axis)
    args.setdefault("seed", cfg.seed)
    state, nu, _ = reichardt_init(domain, **args)
    return state, nu


def _min_spacing(domain):
    # smallest cell extent, from the metric Jacobian
    return float(domain.jac.min()) ** (1.0 / domain.dim)


def lid_timestep(domain, speed, cfl, dt_max, remaining=None):
    """CFL-style step bound from a prescribed boundary speed."""
    h = _min_spacing(domain)
    dt = dt_max if speed == 0 else min(dt_max, cfl * h / abs(speed))
    if remaining is not None:
        if remaining < 1.5 * dt:
            dt = remaining
    return float(dt)


@dataclass
class CaseResult:
    state: object
    steps_run: int
    time: float
    steady: bool
    diagnostics: object            # last step's diagnostics
    stats: object = None           # ChannelAccumulator when collected


def run_case(cfg, collect_tapes=False, on_step=None):
    """Forward rollout per the config. Failures carry the step index."""
    cfg.validate()
    domain = cfg.build_mesh()
    state, nu = initial_state(domain, cfg)
    return run_rollout(domain, state, cfg, nu=nu,
                       collect_tapes=collect_tapes, on_step=on_step)


def run_rollout(domain, state, cfg, nu=None, lid_speed=None,
                collect_tapes=False, on_step=None):
    """March a prepared state per the config's time controls."""
    nu = cfg.nu if nu is None else nu
    ws = PisoWorkspace(domain)
    acc = None
    if cfg.stats_every:
        acc = ChannelAccumulator(domain, wall_axis=cfg.wall_axis)
    tapes = [] if collect_tapes else None
    steady = False
    elapsed = 0.0
    k = 0
    diag = None
    max_steps = cfg.steps if cfg.steps is not None else 10 ** 9
    fixed_dt = None
    if cfg.dt is None and lid_speed is not None and cfg.horizon is not None:
        # known driving speed: divide the horizon into uniform steps, so
        # the time grid is piecewise constant in the speed and nearby
        # speeds integrate on identical grids
        nominal = lid_timestep(domain, lid_speed, cfg.cfl, cfg.dt_max)
        n = max(1, int(round(cfg.horizon / nominal)))
        fixed_dt = cfg.horizon / n
    while k < max_steps:
        if cfg.horizon is not None and elapsed >= cfg.horizon - 1e-12:
            break
        if cfg.dt is not None:
            dt = cfg.dt
        elif fixed_dt is not None:
            dt = fixed_dt
        else:
            remaining = None if cfg.horizon is None \
                else cfg.horizon - elapsed
            speed = float(np.abs(state.u).max())
            dt = lid_timestep(domain, speed, cfg.cfl, cfg.dt_max, remaining)
        source = cfg.source
        if cfg.forcing == "wall_shear":
            source = wall_forcing_source(domain, state.u, nu,
                                         wall_axis=cfg.wall_axis,
                                         flow_axis=cfg.flow_axis,
                                         delta=cfg.delta)
        scfg = StepConfig(dt=dt, nu=nu, n_correctors=cfg.n_correctors,
                          nonortho_correctors=cfg.nonortho_correctors,
                          source=source, tol=cfg.tol, maxiter=cfg.maxiter)
        tape = StepTape() if collect_tapes else None
        u_prev = state.u
        try:
            state, diag = piso_step(domain, state, scfg, workspace=ws,
                                    tape=tape)
        except Exception as exc:
            raise RuntimeError(f"step {k} failed: {exc}") from exc
        if collect_tapes:
            tapes.append(tape)
        elapsed += dt
        k += 1
        if acc is not None and k > cfg.stats_warmup \
                and (k - cfg.stats_warmup) % cfg.stats_every == 0:
            acc.add_frame(state.u, dt=dt)
        if on_step is not None:
            on_step(k, state, diag)
        if cfg.steady_tol is not None:
            delta = float(np.abs(state.u - u_prev).max()) / dt
            if delta < cfg.steady_tol:
                steady = True
                break
    result = CaseResult(state=state, steps_run=k, time=elapsed,
                        steady=steady, diagnostics=diag, stats=acc)
    if collect_tapes:
        return result, tapes
    return result


# ---------------------------------------------------------------------------
# gradient-descent optimization


@dataclass
class OptimizationTrace:
    losses: list = field(default_factory=list)
    params: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    times: list = field(default_factory=list)
    diverged: bool = False

    @property
    def final_loss(self):
        return self.losses[-1] if self.losses else float("nan")

    @property
    def final_param(self):
        return self.params[-1] if self.params else None

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss", "param", "grad_norm",
                        "seconds"])
            for i, (l, p, g, t) in enumerate(zip(
                    self.losses, self.params, self.grad_norms, self.times)):
                pv = p if np.isscalar(p) else float(np.linalg.norm(p))
                w.writerow([i, l, pv, g, t])


def _opt_setup(cfg):
    opt = cfg.optimization
    if opt is None:
        raise ValueError("config has no optimization block")
    domain = cfg.build_mesh()
    init = opt.init
    ref = opt.reference
    defaults = {"scale": (0.5, 1.0), "lid": (1.0, 0.2),
                "nu": (0.005, 0.001)}
    if opt.target in defaults:
        d_init, d_ref = defaults[opt.target]
        init = d_init if init is None else float(init)
        ref = d_ref if ref is None else float(ref)
    elif opt.target == "joint":
        # parameter vector (lid speed, viscosity)
        init = (1.0, 0.005) if init is None else init
        ref = (0.2, 0.001) if ref is None else ref
        init = np.asarray(init, dtype=np.float64)
        ref = np.asarray(ref, dtype=np.float64)
        if init.shape != (2,) or ref.shape != (2,):
            raise ValueError("joint optimization takes (lid, nu) pairs")
    else:
        init = np.zeros((domain.n, domain.dim)) if init is None \
            else np.asarray(init, dtype=np.float64)
        if ref is None:
            raise ValueError("source optimization needs a reference field")
        ref = np.asarray(ref, dtype=np.float64)
    lid_face = None
    lid_profile = None
    if opt.target in ("lid", "joint"):
        ax = cfg.mesh_args.get("lid_axis", 1)
        side = cfg.mesh_args.get("lid_side", 0)
        lid_face = next(i for i, f in enumerate(domain.bfaces)
                        if f.axis == ax and f.side == side)
        lid_profile = np.zeros((domain.bfaces[lid_face].m, domain.dim))
        lid_profile[:, cfg.flow_axis] = 1.0
    return domain, opt, init, ref, lid_face, lid_profile


def _opt_rollout(domain, cfg, opt, param, lid_face, lid_profile,
                 collect_tapes):
    """One forward pass with the parameter applied to its degree of
    freedom. Returns (result, tapes or None)."""
    nu = cfg.nu
    lid_speed = None
    mut = cfg
    if opt.target == "scale":
        u0 = float(param) * gauss_profile(domain, **cfg.u0_args)
        state = make_state(domain, u0=u0)
    elif opt.target == "lid":
        state = make_state(domain)
        state.bc[lid_face][:] = float(param) * lid_profile
        lid_speed = abs(float(param))
    elif opt.target == "nu":
        state = make_state(domain)
        nu = float(param)
        lid_speed = _configured_lid_speed(domain, cfg)
    elif opt.target == "joint":
        state = make_state(domain)
        state.bc[lid_face][:] = float(param[0]) * lid_profile
        nu = float(param[1])
        lid_speed = abs(float(param[0]))
    else:
        state = make_state(domain)
        mut = replace(cfg, source=np.asarray(param))
    out = run_rollout(domain, state, mut, nu=nu, lid_speed=lid_speed,
                      collect_tapes=collect_tapes)
    return out if collect_tapes else (out, None)


def _configured_lid_speed(domain, cfg):
    speeds = [float(np.abs(f.initial_values(domain.dim)).max())
              for f in domain.bfaces
              if f.kind == "dirichlet" and f.initial_values(domain.dim)
              is not None]
    speeds = [s for s in speeds if s > 0]
    return max(speeds) if speeds else None


def optimize(cfg):
    """Plain gradient descent on the configured degree of freedom.

    The reference state is produced by running the identical case at the
    reference parameter. The loss is the half squared L2 distance of the
    final velocity to the reference, 0.5*||u - u_hat||^2, plus an optional
    0.5*weight_decay*||theta||^2 parameter penalty.
    """
    cfg.validate()
    domain, opt, param, ref_param, lid_face, lid_profile = _opt_setup(cfg)
    ref_result, _ = _opt_rollout(domain, cfg, opt, ref_param, lid_face,
                                 lid_profile, False)
    u_hat = ref_result.state.u
    trace = OptimizationTrace()
    scalar = opt.target not in ("source", "joint")
    for _ in range(opt.iterations):
        t0 = time.perf_counter()
        loss = float("inf")
        g = None
        try:
            result, tapes = _opt_rollout(domain, cfg, opt, param, lid_face,
                                         lid_profile, True)
            diff = result.state.u - u_hat
            loss = 0.5 * float(np.vdot(diff, diff))
            if opt.weight_decay:
                loss += 0.5 * opt.weight_decay * float(np.vdot(param, param))
            if np.isfinite(loss):
                cots = [None] * (len(tapes) - 1) + [
                    GradState(u=diff, p=np.zeros(domain.n))]
                g = backward_rollout(domain, tapes, cots, path=opt.path,
                                     tol=cfg.tol, maxiter=cfg.maxiter)
        except RuntimeError:
            # the parameter left the basin where the flow (or its adjoint)
            # is solvable; fall through with g unset
            pass
        if g is None:
            trace.losses.append(loss)
            trace.params.append(param if scalar else param.copy())
            trace.grad_norms.append(float("nan"))
            trace.times.append(time.perf_counter() - t0)
            trace.diverged = True
            break
        if opt.target == "scale":
            grad = float(np.vdot(g.u, gauss_profile(domain, **cfg.u0_args)))
        elif opt.target == "lid":
            grad = float(np.vdot(g.bc[lid_face], lid_profile))
        elif opt.target == "nu":
            grad = g.nu
        elif opt.target == "joint":
            grad = np.array([float(np.vdot(g.bc[lid_face], lid_profile)),
                             float(g.nu)])
        else:
            grad = g.source
        if opt.weight_decay:
            grad = grad + opt.weight_decay * (
                param if scalar else np.asarray(param))
        gnorm = abs(grad) if scalar else float(np.linalg.norm(grad))
        trace.losses.append(loss)
        trace.params.append(param if scalar else param.copy())
        trace.grad_norms.append(gnorm)
        trace.times.append(time.perf_counter() - t0)
        if not np.isfinite(gnorm):
            trace.diverged = True
            break
        if opt.target == "joint":
            param = param - np.asarray(opt.lr) * grad
        else:
            param = param - opt.lr * grad
    return trace


def scaling_task_config(steps=1, lr=0.01, path=GradientPath.FULL,
                        iterations=60):
    """Canonical initial-velocity-scale benchmark on the 18x16 box.

    The Gaussian amplitude and step size put the rollout in an advective
    regime where the gradient-path differences are observable at long n.
    """
    return CaseConfig(name="scaling", mesh="box",
                      mesh_args={"shape": (18, 16)}, nu=0.002, dt=0.5,
                      steps=steps, tol=1e-10, u0="gauss",
                      u0_args={"amplitude": 2.5},
                      optimization=OptimizeSpec(target="scale", lr=lr,
                                                iterations=iterations,
                                                path=path))


def lid_task_config(iterations=100, lr=6e-2):
    """Lid-velocity optimization: drive the lid from 1.0 to 0.2.

    The target state sits at Re = 200; the viscosity stays fixed while
    the lid speed descends to the reference value. The printed learning
    rate is only stable for this operating point.
    """
    return CaseConfig(name="lid-velocity", mesh="cavity",
                      mesh_args={"shape": (32, 32)}, nu=0.001,
                      cfl=8.0, dt_max=1.25, horizon=10.0, tol=1e-10,
                      optimization=OptimizeSpec(target="lid", lr=lr,
                                                iterations=iterations,
                                                init=1.0, reference=0.2))


def viscosity_task_config(iterations=100, lr=2e-5):
    """Viscosity optimization on the same cavity, fixed slow lid.

    The lid speed is chosen so the printed learning rate sits inside
    the gradient-descent stability window of the loss curvature at the
    target viscosity; faster lids steepen the loss beyond it.
    """
    return CaseConfig(name="viscosity", mesh="cavity",
                      mesh_args={"shape": (32, 32), "lid_speed": 0.15},
                      nu=0.005, cfl=8.0, dt_max=1.25, horizon=10.0,
                      tol=1e-10,
                      optimization=OptimizeSpec(target="nu", lr=lr,
                                                init=0.005,
                                                reference=0.001,
                                                iterations=iterations))


def standard_gradcheck(seed=0, threshold=1e-4):
    """Composite finite-difference checks of the analytic gradients.

    Full-step (plus one three-step) gradient checks on a family of small
    meshes that together exercise every backward kernel: interior and
    boundary transforms, non-orthogonal correction, rotated block gluing,
    and 3D metrics. Returns a list of (label, report) pairs.
    """
    from .adjoint import gradcheck

    rng = np.random.default_rng(seed)
    out = []

    def check(label, domain, scfg, steps=1, lid_axis=None):
        n, d = domain.n, domain.dim
        wu = rng.standard_normal((n, d))
        wp = rng.standard_normal(n)
        lid_face = lid_profile = None
        inputs = {"u0": 0.3 * rng.standard_normal((n, d)),
                  "nu": 0.05 + 0.02 * rng.random(),
                  "src": 0.2 * rng.standard_normal((n, d))}
        if lid_axis is not None:
            lid_face = next(i for i, f in enumerate(domain.bfaces)
                            if f.axis == lid_axis and f.side == 0)
            lid_profile = rng.standard_normal(
                (domain.bfaces[lid_face].m, d))
            inputs["lid"] = 0.8

        def fn(inp):
            c = replace(scfg, nu=float(inp["nu"]),
                        source=np.asarray(inp["src"], dtype=np.float64))
            state = make_state(domain, u0=np.asarray(inp["u0"]))
            if lid_face is not None:
                state.bc[lid_face][:] = float(inp["lid"]) * lid_profile
            tapes = []
            for _ in range(steps):
                t = StepTape()
                state, _ = piso_step(domain, state, c, tape=t)
                tapes.append(t)
            loss = float(np.vdot(wu, state.u) + np.vdot(wp, state.p))
            cots = [None] * (steps - 1) + [GradState(u=wu, p=wp)]
            g = backward_rollout(domain, tapes, cots,
                                 path=GradientPath.FULL, tol=1e-12)
            grads = {"u0": g.u, "nu": g.nu, "src": g.source}
            if lid_face is not None:
                grads["lid"] = float(np.vdot(g.bc[lid_face], lid_profile))
            return loss, grads

        out.append((label, gradcheck(fn, inputs, threshold=threshold,
                                     stage=label)))

    base = StepConfig(dt=0.1, nu=0.05, tol=1e-12)
    check("cavity-2d", mesh.make_cavity(shape=(5, 5)), base, lid_axis=1)
    check("distorted-duct",
          mesh.make_poiseuille(shape=(6, 4), distort=0.35),
          replace(base, nonortho_correctors=2))
    check("rotated-two-block", mesh.make_two_block((3, 3), rotated=True),
          base)
    check("box-3d", mesh.make_box((4, 4, 4)), base)
    check("rollout-3-steps", mesh.make_cavity(shape=(5, 4)), base, steps=3)
    return out


def joint_task_config(iterations=100, lrs=(6e-2, 2e-7)):
    """Joint (lid speed, viscosity) optimization on the 32x32 cavity.

    The two quantities are coupled through the final velocity magnitude,
    so the descent lands on a low-loss pair that need not equal the
    reference; where it lands depends on the relative learning rates.
    The viscosity rate is kept small because the viscosity gradient is
    two orders steeper at the fast-lid start than near the reference.
    """
    return CaseConfig(name="joint", mesh="cavity",
                      mesh_args={"shape": (32, 32)}, nu=0.005,
                      cfl=8.0, dt_max=1.25, horizon=10.0, tol=1e-10,
                      optimization=OptimizeSpec(target="joint", lr=lrs,
                                                iterations=iterations,
                                                init=(1.0, 0.005),
                                                reference=(0.2, 0.001)))


def centerline_profile(domain, u, component=0, axis=0, position=0.5):
    """Velocity component along the mesh line nearest to ``position``.

    The classic cavity diagnostic: ``axis=0, position=0.5`` samples u on
    the vertical center line. Linearly interpolates between the two cell
    columns bracketing the line and returns (coordinate, value) ordered
    along the other axis. Single-block 2D meshes only.
    """
    if domain.dim != 2 or len(domain.block_shapes) != 1:
        raise ValueError("center-line extraction needs one 2D block")
    grid = domain.block_index_grid(0)
    if axis == 1:
        grid = grid.T
    mid = grid.shape[1] // 2
    col_pos = domain.centers[grid[:, mid], axis]
    if position <= col_pos[0] or position >= col_pos[-1]:
        raise ValueError("position outside the interior column range")
    hi = int(np.searchsorted(col_pos, position))
    lo = hi - 1
    w = (col_pos[hi] - position) / (col_pos[hi] - col_pos[lo])
    vals = w * u[grid[lo], component] + (1.0 - w) * u[grid[hi], component]
    coord = w * domain.centers[grid[lo], 1 - axis] \
        + (1.0 - w) * domain.centers[grid[hi], 1 - axis]
    return coord, vals


def path_ablation(cfg, paths=None, lengths=(1, 10), lrs=None):
    """Optimization traces for each (gradient path, rollout length).

    Divergence in one trace is recorded and the sweep continues. ``lrs``
    optionally overrides the learning rate per (path, n) key.
    """
    cfg.validate()
    if cfg.optimization is None or cfg.optimization.target != "scale":
        raise ValueError("path ablation runs on the scaling task")
    if paths is None:
        paths = list(GradientPath)
    out = {}
    for n in lengths:
        for path in paths:
            path = GradientPath.parse(path) if isinstance(path, str) \
                else path
            lr = cfg.optimization.lr
            if lrs and (path, n) in lrs:
                lr = lrs[(path, n)]
            sub = replace(cfg, steps=n, horizon=None,
                          optimization=replace(cfg.optimization, path=path,
                                               lr=lr))
            out[(path, n)] = optimize(sub)
    return out
