"""Robust aggregation rules for the federated server.

Every rule maps the round's client updates, plus whatever side information
it is entitled to, onto a single aggregated delta.  The pure functions in
this module implement the individual rules and take all inputs explicitly;
``AggregationRule`` wraps them with per-rule parameters, per-rule state
(the clipping reference vector), and a deterministic per-round random
stream, exposing the ``aggregate(updates, info)`` interface the federation
engine expects.  The two hybrid schemes compose wrapped rules: one picks
the constituent whose output minimizes empirical risk on a reference
dataset, the other clusters the constituents' outputs and averages the
majority cluster.
"""
import dataclasses
import difflib
import math

import numpy as np

from .federation import sgd_delta
from .model import ModelSpec, risk
from .numerics import (
    Rng,
    dct2,
    density_cluster,
    pairwise_distances,
    require_finite,
    top_right_singular_vector,
)

CC_RADIUS = 10.0
SIGNGUARD_NORM_LO = 0.1
SIGNGUARD_NORM_HI = 3.0
SIGNGUARD_COORD_CAP = 1000
SIGNGUARD_SPLIT_SSE = 0.15
DNC_SUBSAMPLE_CAP = 5000
BALANCE_PHI = 1.0
BALANCE_KAPPA = 1.0


@dataclasses.dataclass(frozen=True)
class AggregationOutcome:
    """One aggregated delta plus the evidence behind it."""

    delta: np.ndarray
    accepted_ids: tuple
    chosen: str
    diagnostics: dict = dataclasses.field(default_factory=dict)


def _collect(updates):
    # canonical ascending-id order makes every rule's arithmetic, not just
    # its selections, independent of submission order
    updates = sorted(updates, key=lambda u: int(u.client_id))
    if not updates:
        raise ValueError("no updates to aggregate")
    ids = [int(u.client_id) for u in updates]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate client ids")
    deltas = np.stack([np.asarray(u.delta, dtype=np.float64) for u in updates])
    return ids, deltas


def _outcome(ids, delta, accepted, chosen, **diagnostics) -> AggregationOutcome:
    accepted = tuple(sorted(int(i) for i in accepted))
    if not set(accepted) <= set(ids):
        raise ValueError("accepted ids are not a subset of submitted ids")
    return AggregationOutcome(
        delta=require_finite(np.asarray(delta, dtype=np.float64), "aggregated delta"),
        accepted_ids=accepted,
        chosen=chosen,
        diagnostics=diagnostics,
    )


def mean_rule(updates) -> AggregationOutcome:
    """Plain unweighted averaging; the no-defense baseline."""
    ids, deltas = _collect(updates)
    return _outcome(ids, deltas.mean(axis=0), ids, "fedavg")


def median(updates) -> AggregationOutcome:
    """Coordinate-wise median; even counts average the two middle values."""
    ids, deltas = _collect(updates)
    return _outcome(ids, np.median(deltas, axis=0), ids, "median")


def trimmed_mean(updates, attacker_count: int) -> AggregationOutcome:
    """Drop the largest and smallest attacker_count values per coordinate."""
    ids, deltas = _collect(updates)
    a = int(attacker_count)
    m = len(ids)
    if a < 0:
        raise ValueError("attacker count must be nonnegative")
    if m - 2 * a < 1:
        raise ValueError("trim exceeds population")
    if a == 0:
        return _outcome(ids, deltas.mean(axis=0), ids, "trimmed_mean")
    ordered = np.sort(deltas, axis=0)
    kept = ordered[a : m - a]
    return _outcome(ids, kept.mean(axis=0), ids, "trimmed_mean")


def _krum_scores(deltas, neighbor_count: int) -> np.ndarray:
    # score_i = sum of squared distances to the neighbor_count nearest others;
    # squared distances computed directly so near-ties are not perturbed by a
    # sqrt round-trip
    m = deltas.shape[0]
    sq = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            gap = deltas[i] - deltas[j]
            sq[i, j] = sq[j, i] = float(np.sum(gap * gap))
    scores = np.empty(m)
    for i in range(m):
        others = np.sort(np.delete(sq[i], i))
        scores[i] = float(np.sum(others[:neighbor_count]))
    return scores


def krum(updates, attacker_count: int) -> AggregationOutcome:
    """Return the single update closest to its nearest peers.

    Each update is scored by the sum of squared Euclidean distances to its
    M - A - 2 nearest neighbors; the minimizer wins, with score ties broken
    toward the lowest client id.
    """
    ids, deltas = _collect(updates)
    a = int(attacker_count)
    m = len(ids)
    if a < 0:
        raise ValueError("attacker count must be nonnegative")
    if m - a - 2 < 1:
        raise ValueError("krum needs at least attacker_count + 3 updates")
    scores = _krum_scores(deltas, m - a - 2)
    best = min(range(m), key=lambda i: (scores[i], ids[i]))
    return _outcome(
        ids,
        deltas[best],
        [ids[best]],
        "krum",
        scores={ids[i]: float(scores[i]) for i in range(m)},
    )


def multi_krum(updates, attacker_count: int, select_count: int | None = None) -> AggregationOutcome:
    """Select repeatedly by the krum criterion and average the selections.

    Scores are recomputed on the shrinking pool after every pick.  Once the
    pool drops below attacker_count + 3 the neighbor count bottoms out at
    zero, making the remaining picks pure lowest-id tie-breaks; that keeps
    the full range select_count <= M - A usable (select_count = M with no
    attackers reduces to plain averaging).
    """
    ids, deltas = _collect(updates)
    a = int(attacker_count)
    m = len(ids)
    if a < 0:
        raise ValueError("attacker count must be nonnegative")
    if m - a - 2 < 1:
        raise ValueError("krum needs at least attacker_count + 3 updates")
    c = m - a if select_count is None else int(select_count)
    if not 1 <= c <= m - a:
        raise ValueError("select count must lie in [1, M - A]")
    pool = list(range(m))
    chosen: list[int] = []
    for _ in range(c):
        neighbor_count = max(0, len(pool) - a - 2)
        scores = _krum_scores(deltas[pool], neighbor_count)
        j = min(range(len(pool)), key=lambda t: (scores[t], ids[pool[t]]))
        chosen.append(pool.pop(j))
    accepted = [ids[i] for i in chosen]
    return _outcome(ids, deltas[chosen].mean(axis=0), accepted, "multi_krum")


def centered_clipping(updates, center, radius: float = CC_RADIUS) -> AggregationOutcome:
    """Clip each update toward a reference vector, then average.

    Updates within the radius pass through unchanged; the rest are pulled
    onto the sphere of that radius around the reference.  The caller is
    expected to carry the output forward as the next round's reference.
    """
    ids, deltas = _collect(updates)
    if radius <= 0:
        raise ValueError("clipping radius must be positive")
    center = np.asarray(center, dtype=np.float64)
    clipped = 0
    out = np.zeros_like(center)
    for row in deltas:
        gap = row - center
        dist = float(np.linalg.norm(gap))
        if dist <= radius:
            out += row
        else:
            out += center + (radius / dist) * gap
            clipped += 1
    return _outcome(ids, out / len(ids), ids, "centered_clipping", clipped=clipped)


def dnc(
    updates,
    attacker_count: int,
    rng: Rng,
    subsample_size: int | None = None,
    filter_factor: float = 1.0,
) -> AggregationOutcome:
    """Spectral outlier filtering on a random coordinate subsample.

    Rows are centered and projected onto their top right singular vector;
    the squared projection is the outlier score, and the M - ceil(c*A)
    lowest-scoring clients are averaged.
    """
    ids, deltas = _collect(updates)
    a = int(attacker_count)
    m, d = deltas.shape
    if a < 0:
        raise ValueError("attacker count must be nonnegative")
    s = min(d, DNC_SUBSAMPLE_CAP) if subsample_size is None else int(subsample_size)
    if not 1 <= s <= d:
        raise ValueError("subsample size must lie in [1, d]")
    keep = m - math.ceil(filter_factor * a)
    if keep < 1:
        raise ValueError("filter factor removes every client")
    coords = np.sort(rng.choice(d, size=s, replace=False))
    sub = deltas[:, coords]
    centered = sub - sub.mean(axis=0)
    if not np.any(centered):
        # no signal to project on; treat everyone as benign
        return _outcome(ids, deltas.mean(axis=0), ids, "dnc", degenerate=True)
    v = top_right_singular_vector(centered)
    scores = (centered @ v) ** 2
    order = sorted(range(m), key=lambda i: (scores[i], ids[i]))
    kept = sorted(order[:keep])
    accepted = [ids[i] for i in kept]
    return _outcome(
        ids,
        deltas[kept].mean(axis=0),
        accepted,
        "dnc",
        scores={ids[i]: float(scores[i]) for i in range(m)},
    )


def _two_means(points: np.ndarray, max_iters: int = 100) -> np.ndarray:
    """Deterministic 2-means: seeded from the farthest pair, Lloyd updates.

    Returns 0/1 labels.  Assignment ties go to cluster 0, and iteration
    stops at the first assignment fixpoint.
    """
    n = points.shape[0]
    if n < 2:
        return np.zeros(n, dtype=int)
    gaps = pairwise_distances(points).entries
    seed = np.unravel_index(np.argmax(gaps), gaps.shape)
    centers = points[list(seed)].copy()
    labels = np.zeros(n, dtype=int)
    for it in range(max_iters):
        d0 = np.linalg.norm(points - centers[0], axis=1)
        d1 = np.linalg.norm(points - centers[1], axis=1)
        new_labels = (d1 < d0).astype(int)
        if it > 0 and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in (0, 1):
            members = points[labels == c]
            if members.size:
                centers[c] = members.mean(axis=0)
    return labels


def _split_is_spurious(points: np.ndarray, labels: np.ndarray) -> bool:
    """Whether a 2-means split of the sign-fraction triples reflects real
    structure or just halves one homogeneous cloud.

    The split counts as real only when it explains almost all of the
    population variance: within-cluster SSE after the split at most
    SIGNGUARD_SPLIT_SSE of the total SSE (the Duda-Hart Je(2)/Je(1)
    statistic).  The best split of a unimodal Gaussian cloud leaves about
    1 - 2/pi of the variance unexplained, while opposed sign patterns
    leave almost none, so 0.15 sits between the two regimes.
    """
    if len(set(labels.tolist())) < 2:
        return True
    total = float(np.sum((points - points.mean(axis=0)) ** 2))
    if total == 0.0:
        return True
    within = 0.0
    for c in (0, 1):
        members = points[labels == c]
        within += float(np.sum((members - members.mean(axis=0)) ** 2))
    return within / total > SIGNGUARD_SPLIT_SSE


def signguard(
    updates,
    rng: Rng,
    norm_lo: float = SIGNGUARD_NORM_LO,
    norm_hi: float = SIGNGUARD_NORM_HI,
    coord_cap: int = SIGNGUARD_COORD_CAP,
) -> AggregationOutcome:
    """Filter on update norms and on agreement of gradient signs.

    Gate one keeps clients whose norm falls within a band around the median
    norm.  Gate two clusters clients by their (positive, negative, zero)
    sign fractions on a random coordinate subset and keeps the largest
    cluster.  The mean is taken over the intersection, falling back to the
    norm gate alone when the intersection is empty.
    """
    ids, deltas = _collect(updates)
    m, d = deltas.shape
    if m < 2:
        raise ValueError("sign statistics need at least two updates")
    norms = np.linalg.norm(deltas, axis=1)
    med = float(np.median(norms))
    s1 = {ids[i] for i in range(m) if norm_lo * med <= norms[i] <= norm_hi * med}

    coords = rng.choice(d, size=min(d, coord_cap), replace=False)
    signs = np.sign(deltas[:, coords])
    triples = np.stack(
        [(signs > 0).mean(axis=1), (signs < 0).mean(axis=1), (signs == 0).mean(axis=1)],
        axis=1,
    )
    labels = _two_means(triples)
    if _split_is_spurious(triples, labels):
        # one homogeneous cloud: forcing two means would halve it arbitrarily
        s2 = set(ids)
    else:
        sizes = [int((labels == c).sum()) for c in (0, 1)]
        if sizes[0] == sizes[1]:
            # equal halves: keep the cluster holding the lowest client id
            winner = labels[int(np.argmin(ids))]
        else:
            winner = int(np.argmax(sizes))
        s2 = {ids[i] for i in range(m) if labels[i] == winner}

    accepted = sorted(s1 & s2)
    fallback = not accepted
    if fallback:
        accepted = sorted(s1)
    rows = [i for i in range(m) if ids[i] in set(accepted)]
    return _outcome(
        ids,
        deltas[rows].mean(axis=0),
        accepted,
        "signguard",
        norm_gate=sorted(s1),
        sign_cluster=sorted(s2),
        fallback=fallback,
    )


def _majority_frequency_cluster(vectors: np.ndarray):
    """Indices of the majority low-frequency cluster, or None when no
    cluster reaches majority size."""
    m, d = vectors.shape
    cut = math.ceil(d / 2)
    low = np.stack([dct2(v)[:cut] for v in vectors])
    dist = pairwise_distances(low, metric="cosine")
    labels = density_cluster(dist, min_cluster_size=m // 2 + 1)
    kept = [int(c) for c in np.unique(labels) if c >= 0]
    if not kept:
        return None
    # min_cluster_size > M/2 leaves room for at most one cluster
    best = max(kept, key=lambda c: (labels == c).sum())
    return np.flatnonzero(labels == best)


def freqfed(updates) -> AggregationOutcome:
    """Cluster clients on low-frequency transform coefficients.

    Each delta is reduced to the first half of its cosine-transform
    spectrum; clients are clustered on pairwise cosine distances and the
    majority cluster is averaged.  If clustering degenerates to all noise,
    every client is kept.
    """
    ids, deltas = _collect(updates)
    if len(ids) < 2:
        raise ValueError("clustering needs at least two updates")
    rows = _majority_frequency_cluster(deltas)
    fallback = rows is None
    if fallback:
        rows = np.arange(len(ids))
    accepted = [ids[i] for i in rows]
    return _outcome(
        ids,
        deltas[rows].mean(axis=0),
        accepted,
        "freqfed",
        cluster_size=len(accepted),
        fallback=fallback,
    )


def balance(
    updates,
    w,
    reference,
    spec: ModelSpec,
    cfg,
    round_index: int,
    total_rounds: int,
    rng: Rng,
    phi: float = BALANCE_PHI,
    kappa: float = BALANCE_KAPPA,
) -> AggregationOutcome:
    """Accept updates close to an honest update computed on reference data.

    The server runs one local update on its reference batch and accepts
    client m iff ||d_ref - d_m|| <= phi * exp(-kappa * k/K) * ||d_ref||,
    a radius that tightens as training progresses.  The mean is taken over
    the accepted set; if nobody passes, the reference update itself is used
    so training never stalls.
    """
    ids, deltas = _collect(updates)
    if reference.size < 1:
        raise ValueError("reference dataset is empty")
    if phi <= 0 or kappa <= 0:
        raise ValueError("phi and kappa must be positive")
    if total_rounds < 1:
        raise ValueError("total rounds must be positive")
    w = np.asarray(w, dtype=np.float64)
    d_ref = sgd_delta(spec, w, reference, cfg.local_steps, cfg.lr, cfg.batch_size, rng)
    threshold = phi * math.exp(-kappa * round_index / total_rounds) * float(
        np.linalg.norm(d_ref)
    )
    rows = [i for i in range(len(ids)) if np.linalg.norm(d_ref - deltas[i]) <= threshold]
    fallback = not rows
    delta = d_ref if fallback else deltas[rows].mean(axis=0)
    return _outcome(
        ids,
        delta,
        [ids[i] for i in rows],
        "balance",
        threshold=threshold,
        fallback=fallback,
    )


# ----------------------------------------------------------- named rules


def pessimistic_attacker_count(num_clients: int) -> int:
    """Largest attacker guess keeping the informed rules defined.

    Used when the scenario does not declare an attacker count: assume just
    under half the population is malicious.
    """
    return max(0, num_clients // 2 - 1)


class AggregationRule:
    """A named rule with parameters, per-rule state, and a seeded stream.

    Randomized rules derive their stream from the server rng by rule name
    and round index, so a rule's draws depend only on (seed, rule, round),
    never on how many other rules ran first.  ``centered_clipping`` keeps
    its reference vector here and advances it to each round's output.
    """

    def __init__(self, name: str, **params):
        self.name = canonical_defense_name(name)
        self.params = params
        self._center = None  # clipping reference, grown lazily
        self._members = None  # hybrid constituents, built once

    def __repr__(self):
        return f"AggregationRule({self.name!r})"

    def _attacker_count(self, m: int) -> int:
        a = self.params.get("attacker_count")
        return pessimistic_attacker_count(m) if a is None else int(a)

    def _rng(self, info) -> Rng:
        return info.rng.substream(f"{self.name}.{info.round_index}")

    def _rules(self):
        if self._members is None:
            given = self.params.get("rules")
            self._members = (
                list(given)
                if given is not None
                else default_defense_set(**self.params.get("member_params", {}))
            )
        return self._members

    def _reference(self):
        ref = self.params.get("reference")
        if ref is None:
            raise ValueError(f"{self.name} needs a reference dataset")
        return ref

    def aggregate(self, updates, info) -> AggregationOutcome:
        updates = list(updates)
        m = len(updates)
        p = self.params
        name = self.name
        if name == "fedavg":
            return mean_rule(updates)
        if name == "median":
            return median(updates)
        if name == "trimmed_mean":
            return trimmed_mean(updates, self._attacker_count(m))
        if name == "krum":
            return krum(updates, self._attacker_count(m))
        if name == "multi_krum":
            return multi_krum(updates, self._attacker_count(m), p.get("select_count"))
        if name == "centered_clipping":
            if self._center is None:
                self._center = np.zeros(info.spec.weight_dim)
            out = centered_clipping(updates, self._center, p.get("radius", CC_RADIUS))
            self._center = out.delta
            return out
        if name == "dnc":
            return dnc(
                updates,
                self._attacker_count(m),
                self._rng(info),
                p.get("subsample_size"),
                p.get("filter_factor", 1.0),
            )
        if name == "signguard":
            return signguard(
                updates,
                self._rng(info),
                p.get("norm_lo", SIGNGUARD_NORM_LO),
                p.get("norm_hi", SIGNGUARD_NORM_HI),
                p.get("coord_cap", SIGNGUARD_COORD_CAP),
            )
        if name == "freqfed":
            return freqfed(updates)
        if name == "balance":
            return balance(
                updates,
                info.w,
                self._reference(),
                info.spec,
                info.cfg,
                info.round_index,
                info.total_rounds,
                self._rng(info),
                p.get("phi", BALANCE_PHI),
                p.get("kappa", BALANCE_KAPPA),
            )
        if name == "hybrid_r":
            return hybrid_r(updates, info, self._reference(), self._rules())
        if name == "hybrid_nr":
            return hybrid_nr(updates, info, self._rules())
        raise AssertionError(f"unhandled rule {name}")


def default_defense_set(**common) -> list:
    """One representative per defense family, in tie-break order."""
    return [
        AggregationRule("centered_clipping", **common),
        AggregationRule("signguard", **common),
        AggregationRule("freqfed", **common),
        AggregationRule("dnc", **common),
        AggregationRule("trimmed_mean", **common),
        AggregationRule("multi_krum", **common),
    ]


def hybrid_r(updates, info, reference, rules) -> AggregationOutcome:
    """Run every rule in the set, keep the output of lowest empirical risk.

    Risk is measured on the reference batch at the weight the global step
    would produce.  Ties keep the earliest rule in the declared order, and
    a constituent that raises is skipped with a diagnostic; if all of them
    fail, aggregation fails.
    """
    rules = list(rules)
    if not rules:
        raise ValueError("defense set is empty")
    if reference.size < 1:
        raise ValueError("reference dataset is empty")
    best = None
    risks, skipped = {}, {}
    for rule in rules:
        try:
            out = rule.aggregate(updates, info)
        except ValueError as err:
            skipped[rule.name] = str(err)
            continue
        value = risk(info.spec, info.w - info.global_lr * out.delta, reference)
        risks[rule.name] = float(value)
        if best is None or value < best[0]:
            best = (value, rule.name, out)
    if best is None:
        raise ValueError("no viable defense")
    _, name, out = best
    return AggregationOutcome(
        delta=out.delta,
        accepted_ids=out.accepted_ids,
        chosen=name,
        diagnostics={"risks": risks, "skipped": skipped, **out.diagnostics},
    )


def hybrid_nr(updates, info, rules) -> AggregationOutcome:
    """Aggregate with every rule, then cluster the aggregates.

    Stage one maps the updates through each constituent; stage two treats
    the constituent outputs as a fresh population and keeps the majority
    low-frequency cluster, averaging it.  A single-rule set passes its
    output straight through.
    """
    rules = list(rules)
    if not rules:
        raise ValueError("defense set is empty")
    ids, _ = _collect(updates)
    stage_one = []
    skipped = {}
    for rule in rules:
        try:
            stage_one.append((rule.name, rule.aggregate(updates, info)))
        except ValueError as err:
            skipped[rule.name] = str(err)
    if not stage_one:
        raise ValueError("no viable defense")
    candidates = np.stack([out.delta for _, out in stage_one])
    if len(stage_one) == 1:
        rows, fallback = np.array([0]), False
    else:
        rows = _majority_frequency_cluster(candidates)
        fallback = rows is None
        if fallback:
            rows = np.arange(len(stage_one))
    survivors = [stage_one[i][0] for i in rows]
    accepted = sorted(set().union(*(stage_one[i][1].accepted_ids for i in rows)))
    return _outcome(
        ids,
        candidates[rows].mean(axis=0),
        accepted,
        "hybrid_nr",
        survivors=survivors,
        skipped=skipped,
        fallback=fallback,
    )


REGISTRY = (
    "fedavg",
    "median",
    "trimmed_mean",
    "krum",
    "multi_krum",
    "centered_clipping",
    "dnc",
    "signguard",
    "freqfed",
    "balance",
    "hybrid_r",
    "hybrid_nr",
)

ALIASES = {
    "tm": "trimmed_mean",
    "cc": "centered_clipping",
    "mkrum": "multi_krum",
    "multikrum": "multi_krum",
    "hybrid-r": "hybrid_r",
    "hybrid-nr": "hybrid_nr",
}


def canonical_defense_name(name: str) -> str:
    key = name.strip().lower().replace(" ", "_")
    key = ALIASES.get(key, key)
    if key in REGISTRY:
        return key
    close = difflib.get_close_matches(key, REGISTRY + tuple(ALIASES), n=1)
    hint = f" (did you mean {close[0]!r}?)" if close else ""
    raise ValueError(f"unknown defense {name!r}{hint}")
