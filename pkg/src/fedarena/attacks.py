"""Poisoning attacks.

Every attack receives an AttackContext carrying worst-case attacker
knowledge (current benign updates and momenta, the global weights, a shared
attacker dataset) and emits exactly one update per attacker in its group.
Attack groups and per-round schedules are composed by `build_plan`.
"""
from __future__ import annotations

import difflib
import math
from dataclasses import dataclass

import numpy as np

from .federation import ClientUpdate, RoundConfig, RoundView, sgd_delta, sample_batch
from .model import Batch, ModelSpec, accuracy, grad
from .numerics import Rng

MINMAX_GAMMA_INIT = 10.0
MINMAX_HALVINGS = 30


@dataclass(frozen=True)
class AttackContext:
    """What one attacker group sees when crafting its updates.

    benign counts (B) cover honest clients only; a concurrent group's
    current-round updates do not exist yet and are invisible.  Previous-round
    momenta of every attacker are available for momentum bookkeeping.
    """

    round_index: int
    w: np.ndarray
    spec: ModelSpec
    cfg: RoundConfig
    num_clients: int
    benign_updates: tuple
    benign_momenta: tuple
    states: tuple  # ClientStates of this group's attackers
    all_attacker_momenta: dict
    train: Batch  # shared attacker training split
    val: Batch  # shared attacker validation split
    rng: Rng

    @property
    def num_benign(self) -> int:
        return len(self.benign_updates)

    @property
    def num_attackers(self) -> int:
        return len(self.states)

    def benign_delta_sum(self) -> np.ndarray:
        return np.sum([u.delta for u in self.benign_updates], axis=0)

    def benign_delta_mean(self) -> np.ndarray:
        return self.benign_delta_sum() / self.num_benign

    def mean_benign_norm(self) -> float:
        return float(np.mean([np.linalg.norm(u.delta) for u in self.benign_updates]))


def _emit(ctx: AttackContext, deltas) -> list:
    out = []
    for st, delta in zip(ctx.states, deltas):
        out.append(ClientUpdate(client_id=st.id, delta=np.asarray(delta, dtype=np.float64), sample_count=st.data.size))
    return out


# ------------------------------------------------------------------- IPM


def ipm(ctx: AttackContext, epsilon: float = 2.0) -> list:
    """Every attacker submits -(epsilon/B) * sum of benign deltas."""
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    if ctx.num_benign < 1:
        raise ValueError("no benign updates to manipulate")
    delta = -(epsilon / ctx.num_benign) * ctx.benign_delta_sum()
    return _emit(ctx, [delta] * ctx.num_attackers)


# --------------------------------------------------------------- Min-Max


def min_max(ctx: AttackContext, direction=None) -> list:
    """Benign mean plus the largest feasible multiple of a perturbation.

    gamma is maximized by bounded binary search subject to: the attacker's
    distance to any benign update stays within the largest benign pairwise
    distance.  The default perturbation is the negative normalized benign
    mean; a zero mean degenerates to the mean itself.
    """
    if ctx.num_benign < 2:
        raise ValueError("insufficient benign updates")
    deltas = [u.delta for u in ctx.benign_updates]
    mean = ctx.benign_delta_mean()
    if direction is None:
        norm = np.linalg.norm(mean)
        p = -mean / norm if norm > 0 else np.zeros_like(mean)
    else:
        p = np.asarray(direction, dtype=np.float64)

    max_pair = max(
        np.linalg.norm(a - b) for i, a in enumerate(deltas) for b in deltas[i + 1 :]
    )

    def feasible(g: float) -> bool:
        cand = mean + g * p
        return max(np.linalg.norm(cand - d) for d in deltas) <= max_pair

    gamma, step, best = MINMAX_GAMMA_INIT, MINMAX_GAMMA_INIT / 2, 0.0
    for _ in range(MINMAX_HALVINGS):
        if feasible(gamma):
            best = gamma
            gamma += step
        else:
            gamma -= step
        step /= 2
    return _emit(ctx, [mean + best * p] * ctx.num_attackers)


# ------------------------------------------------------------------- ROP


def rop(ctx: AttackContext, lam: float = 0.5, angle: float = math.pi / 3, prev_tilde=None) -> list:
    """Perturbation at a fixed angle to a momentum reference vector.

    The reference blends the previous round's benign momentum mean (zero
    initially) with the current all-client momentum mean, where attacker
    momenta come from their previous submissions.  The output direction is
    sin(angle) along a random orthogonal vector plus cos(angle) along the
    reference, rescaled to the mean benign delta norm so norm screens see a
    typical magnitude.  A zero reference degenerates to a pure random unit
    direction at the same scale.
    """
    if not 0 < lam < 1:
        raise ValueError("lam must lie in (0, 1)")
    if not 0 <= angle < 2 * math.pi:  # 0 means pure reference direction
        raise ValueError("angle must lie in [0, 2*pi)")
    if ctx.num_benign < 1:
        raise ValueError("no benign momenta available")

    benign_m = np.stack(ctx.benign_momenta)
    tilde_prev = (
        np.zeros_like(ctx.w) if prev_tilde is None else np.asarray(prev_tilde, dtype=np.float64)
    )
    total = benign_m.sum(axis=0)
    for m in ctx.all_attacker_momenta.values():  # attackers' previous submissions
        total = total + m
    bar = total / ctx.num_clients
    ref = lam * tilde_prev + (1.0 - lam) * bar

    scale = ctx.mean_benign_norm()
    ref_norm = np.linalg.norm(ref)
    if ref_norm == 0.0:
        g = ctx.rng.normal(ctx.w.size)
        direction = g / np.linalg.norm(g)
        return _emit(ctx, [scale * direction] * ctx.num_attackers)

    rho = None
    for _ in range(16):  # a Gaussian draw parallel to ref has measure zero
        g = ctx.rng.normal(ctx.w.size)
        cand = g - (g @ ref) / ref_norm**2 * ref
        if np.linalg.norm(cand) > 0:
            rho = cand
            break
    if rho is None:
        raise ValueError("could not draw an orthogonal perturbation")
    direction = math.sin(angle) * rho / np.linalg.norm(rho) + math.cos(angle) * ref / ref_norm
    return _emit(ctx, [scale * direction] * ctx.num_attackers)


# -------------------------------------------------------------- Sign Flip


def sign_flip(ctx: AttackContext, scale: float = 10.0) -> list:
    """Negate (and scale) an honest local update computed on attacker data."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    deltas = []
    for st in ctx.states:
        honest = sgd_delta(
            ctx.spec, ctx.w, ctx.train, ctx.cfg.local_steps, ctx.cfg.lr,
            ctx.cfg.batch_size, st.rng,
        )
        deltas.append(-scale * honest)
    return _emit(ctx, deltas)


# -------------------------------------------------------------- Neurotoxin


def _flip_batch(batch: Batch, source: int, target: int, num_classes: int) -> Batch:
    # validated against the model's class universe, not the batch's labels:
    # the target class may be absent from the attacker shard
    if source == target:
        raise ValueError("source and target classes must differ")
    for cls in (source, target):
        if not 0 <= cls < num_classes:
            raise ValueError(f"invalid class {cls}")
    labels = batch.labels.copy()
    labels[labels == source] = target
    return Batch(batch.inputs, labels)


def neurotoxin_mask(mean_benign_delta, omega: float) -> np.ndarray:
    """Boolean mask of the bottom omega fraction of coordinates by magnitude.

    Ties resolve toward lower coordinate indices (stable sort).
    """
    if not 0 < omega < 1:
        raise ValueError("omega must lie in (0, 1)")
    d = mean_benign_delta.size
    keep = int(round(omega * d))
    order = np.argsort(np.abs(mean_benign_delta), kind="stable")
    mask = np.zeros(d, dtype=bool)
    mask[order[:keep]] = True
    return mask


def neurotoxin(
    ctx: AttackContext,
    omega: float = 0.95,
    pgd_steps: int | None = None,
    source: int = 0,
    target: int = 1,
) -> list:
    """Label-flip training projected onto low-magnitude benign coordinates.

    Each attacker runs SGD on the label-flipped attacker split; after every
    step the accumulated delta is zeroed outside the mask of coordinates
    where the mean benign delta is smallest in magnitude.
    """
    if ctx.num_benign < 1:
        raise ValueError("no benign updates to derive the mask from")
    steps = ctx.cfg.local_steps if pgd_steps is None else pgd_steps
    if steps < 1:
        raise ValueError("pgd_steps must be >= 1")
    mask = neurotoxin_mask(ctx.benign_delta_mean(), omega)
    poisoned = _flip_batch(ctx.train, source, target, ctx.spec.num_classes)

    deltas = []
    for st in ctx.states:
        delta = np.zeros_like(ctx.w)
        for _ in range(steps):
            batch = sample_batch(poisoned, ctx.cfg.batch_size, st.rng)
            delta += ctx.cfg.lr * grad(ctx.spec, ctx.w - delta, batch)
            delta[~mask] = 0.0
        deltas.append(delta)
    return _emit(ctx, deltas)


# -------------------------------------------------------------- TrapSetter


@dataclass(frozen=True)
class TrapSetterParams:
    """Scaling and search-geometry knobs.

    Radius bounds are fractions of the mean benign delta norm when
    radius_relative is set (the default); grid_step is always a fraction of
    the per-attacker sampled radius, so grid_step = 0.5 yields the 5x5 mesh
    {-r, -r/2, 0, r/2, r} x {-r, -r/2, 0, r/2, r}.
    """

    zeta_lo: float = 0.8
    zeta_hi: float = 1.2
    radius_lo: float = 0.5
    radius_hi: float = 2.0
    radius_relative: bool = True
    grid_step: float = 0.5
    noise_scale: float = 1.0

    def __post_init__(self):
        if not 0 < self.zeta_lo <= self.zeta_hi:
            raise ValueError("need 0 < zeta_lo <= zeta_hi")
        if not 0 < self.radius_lo <= self.radius_hi:
            raise ValueError("need 0 < radius_lo <= radius_hi")
        if not 0 < self.grid_step <= 2:
            raise ValueError("grid_step must lie in (0, 2] (fraction of the radius)")
        if self.noise_scale <= 0:
            raise ValueError("noise_scale must be positive")


@dataclass(frozen=True)
class TrapSearchResult:
    w_hat: np.ndarray
    kappa1: float
    kappa2: float
    p1: np.ndarray
    p2: np.ndarray
    objective: float


def trap_search(
    w,
    w_tilde,
    radius: float,
    grid_step: float,
    rng: Rng,
    objective,
    noise_scale: float = 1.0,
) -> TrapSearchResult:
    """Grid-minimize an objective around w_tilde inside a radius ball.

    Directions: p1 points against the estimated descent (w - w_tilde),
    falling back to an extra normalized Gaussian draw when that difference
    is zero; p2 is an independent normalized Gaussian.  Candidates
    w_tilde + k1*p1 + k2*p2 outside the ball are skipped.  Ties in the
    objective keep the earliest scan point (ascending k1, then k2).
    """
    w = np.asarray(w, dtype=np.float64)
    w_tilde = np.asarray(w_tilde, dtype=np.float64)
    if radius <= 0:
        raise ValueError("radius must be positive")
    step = grid_step * radius
    if not 0 < step <= 2 * radius:
        raise ValueError("grid step must lie in (0, 2*radius]")

    diff = w - w_tilde
    diff_norm = np.linalg.norm(diff)
    if diff_norm > 0:
        p1 = -diff / diff_norm
    else:
        g = rng.normal(w.size, scale=noise_scale)
        p1 = g / np.linalg.norm(g)
    n = rng.normal(w.size, scale=noise_scale)
    p2 = n / np.linalg.norm(n)

    count = int(math.floor(2 * radius / step + 1e-9)) + 1
    kappas = [-radius + t * step for t in range(count)]

    best = None
    for k1 in kappas:
        for k2 in kappas:
            offset = k1 * p1 + k2 * p2
            if np.linalg.norm(offset) > radius:
                continue
            w_hat = w_tilde + offset
            val = float(objective(w_hat))
            if best is None or val < best.objective:
                best = TrapSearchResult(
                    w_hat=w_hat, kappa1=k1, kappa2=k2, p1=p1, p2=p2, objective=val
                )
    if best is None:
        raise ValueError("no feasible grid point within the radius")
    return best


def trapsetter(ctx: AttackContext, params: TrapSetterParams | None = None, trace: list | None = None) -> list:
    """Steer the aggregate toward a low-accuracy trap weight.

    Per attacker: estimate the honest next global weight w_tilde by local
    SGD on the attacker training split, sample scaling zeta and radius r,
    grid-search a trap weight w_hat minimizing validation accuracy inside
    the r-ball, and emit
        (zeta/A) * [M*w - M*w_hat - (B/zeta) * (w - w_tilde)].
    Under FedAvg with zeta = 1 the expected next global weight is w_hat.
    """
    params = params or TrapSetterParams()
    a_count = ctx.num_attackers
    b_count = ctx.num_benign
    m_count = ctx.num_clients
    if ctx.val.size == 0:
        raise ValueError("empty attacker validation split")

    w_tildes = [
        ctx.w
        - sgd_delta(
            ctx.spec, ctx.w, ctx.train, ctx.cfg.local_steps, ctx.cfg.lr,
            ctx.cfg.batch_size, st.rng,
        )
        for st in ctx.states
    ]
    if params.radius_relative:
        if b_count >= 1:
            base = ctx.mean_benign_norm()
        else:
            base = float(np.mean([np.linalg.norm(ctx.w - wt) for wt in w_tildes]))
        if base == 0.0:
            base = 1.0  # degenerate stationary start; absolute fallback
    else:
        base = 1.0

    deltas = []
    for st, w_tilde in zip(ctx.states, w_tildes):
        zeta = float(ctx.rng.uniform(params.zeta_lo, params.zeta_hi))
        r = float(ctx.rng.uniform(params.radius_lo * base, params.radius_hi * base))
        found = trap_search(
            ctx.w,
            w_tilde,
            r,
            params.grid_step,
            ctx.rng,
            objective=lambda w_hat: accuracy(ctx.spec, w_hat, ctx.val),
            noise_scale=params.noise_scale,
        )
        delta = (zeta / a_count) * (
            m_count * ctx.w - m_count * found.w_hat - (b_count / zeta) * (ctx.w - w_tilde)
        )
        if trace is not None:
            trace.append({"zeta": zeta, "radius": r, "w_tilde": w_tilde, "search": found})
        deltas.append(delta)
    return _emit(ctx, deltas)


# ------------------------------------------------------------------ plans

REGISTRY = {
    "ipm": ipm,
    "min_max": min_max,
    "rop": rop,
    "sf": sign_flip,
    "neurotoxin": neurotoxin,
    "trapsetter": trapsetter,
}
ALIASES = {"nt": "neurotoxin", "minmax": "min_max", "sign_flip": "sf", "trap": "trapsetter"}


def canonical_attack_name(name: str) -> str:
    key = name.strip().lower()
    key = ALIASES.get(key, key)
    if key not in REGISTRY:
        options = sorted(set(REGISTRY) | set(ALIASES))
        hint = difflib.get_close_matches(key, options, n=1)
        suffix = f" (did you mean {hint[0]!r}?)" if hint else ""
        raise ValueError(f"unknown attack {name!r}{suffix}")
    return key


class Attack:
    """One named attack bound to its parameters, with per-run state."""

    def __init__(self, name: str, **params):
        self.name = canonical_attack_name(name)
        if self.name == "trapsetter" and params and "params" not in params:
            params = {"params": TrapSetterParams(**params)}
        self.params = params
        self._rop_prev_tilde = None

    def generate(self, ctx: AttackContext) -> list:
        if self.name == "rop":
            updates = rop(ctx, prev_tilde=self._rop_prev_tilde, **self.params)
            self._rop_prev_tilde = np.mean(np.stack(ctx.benign_momenta), axis=0)
            return updates
        return REGISTRY[self.name](ctx, **self.params)


class AttackPlan:
    """Assigns attacks to attacker groups, per round.

    Static mode keeps fixed groups for every round; alternating mode runs
    one attack over all attackers, cycling through the schedule by round
    index.  The attacker dataset (union of attacker shards) is split 80/20
    into train/validation once, with a dedicated substream.
    """

    def __init__(self, attacker_ids, groups=None, schedule=None):
        self.attacker_ids = tuple(sorted(int(i) for i in attacker_ids))
        if (groups is None) == (schedule is None):
            raise ValueError("exactly one of groups or schedule must be given")
        self.groups = groups
        self.schedule = schedule
        if groups is not None:
            covered = sorted(i for _, ids in groups for i in ids)
            if covered != list(self.attacker_ids):
                raise ValueError("groups must cover every attacker exactly once")
        self._splits = None

    def describe(self) -> str:
        if self.groups is not None:
            return " + ".join(a.name for a, _ in self.groups)
        return " / ".join(a.name for a in self.schedule)

    def _attacker_data(self, view: RoundView):
        if self._splits is None:
            inputs = np.concatenate([st.data.inputs for st in view.attacker_states])
            labels = np.concatenate([st.data.labels for st in view.attacker_states])
            n = labels.size
            perm = view.rng.substream("da_split").permutation(n)
            if n < 2:
                train_idx = val_idx = perm
            else:
                cut = max(1, int(0.8 * n))
                cut = min(cut, n - 1)
                train_idx, val_idx = perm[:cut], perm[cut:]
            self._splits = (
                Batch(inputs[train_idx], labels[train_idx]),
                Batch(inputs[val_idx], labels[val_idx]),
            )
        return self._splits

    def updates_for_round(self, view: RoundView):
        train, val = self._attacker_data(view)
        if self.groups is not None:
            assignments = self.groups
        else:
            attack = self.schedule[view.round_index % len(self.schedule)]
            assignments = [(attack, self.attacker_ids)]

        momenta = {st.id: st.momentum.copy() for st in view.attacker_states}
        benign_momenta = tuple(
            view.benign_momenta[u.client_id] for u in view.benign_updates
        )
        updates = []
        for attack, ids in assignments:
            members = tuple(st for st in view.attacker_states if st.id in set(ids))
            ctx = AttackContext(
                round_index=view.round_index,
                w=view.w,
                spec=view.spec,
                cfg=view.cfg,
                num_clients=view.num_clients,
                benign_updates=view.benign_updates,
                benign_momenta=benign_momenta,
                states=members,
                all_attacker_momenta=momenta,
                train=train,
                val=val,
                rng=view.rng,
            )
            updates.extend(attack.generate(ctx))
        return updates


def build_plan(expr: str, attacker_ids, params_by_attack=None) -> AttackPlan:
    """Parse an attack expression into a plan.

    "a + b" splits attackers evenly into static groups (ascending id order,
    earlier groups take the remainder); "a / b" alternates algorithms over
    rounds for all attackers; a bare name is a single static group.
    """
    params_by_attack = params_by_attack or {}
    attacker_ids = sorted(int(i) for i in attacker_ids)
    if not attacker_ids:
        raise ValueError("no attackers to plan for")

    def make(name: str) -> Attack:
        key = canonical_attack_name(name)
        return Attack(key, **params_by_attack.get(key, {}))

    if "+" in expr and "/" in expr:
        raise ValueError("attack expression cannot mix '+' groups and '/' alternation")
    if "+" in expr:
        names = [n.strip() for n in expr.split("+")]
        share, extra = divmod(len(attacker_ids), len(names))
        if share == 0:
            raise ValueError("more attack groups than attackers")
        groups, start = [], 0
        for gi, name in enumerate(names):
            size = share + (1 if gi < extra else 0)
            groups.append((make(name), tuple(attacker_ids[start : start + size])))
            start += size
        return AttackPlan(attacker_ids, groups=groups)
    if "/" in expr:
        names = [n.strip() for n in expr.split("/")]
        return AttackPlan(attacker_ids, schedule=[make(n) for n in names])
    return AttackPlan(attacker_ids, groups=[(make(expr), tuple(attacker_ids))])
