"""Acceptance gate for the library.

Twelve checks: exact algebraic identities of the attack constructions,
brute-force oracle equivalence for the selection rules, containment and
clipping contracts under adversarial magnitudes, gradient fidelity, and
qualitative attack/defense trends plus timing and determinism contracts at
desk scale (10-class blobs, 30 clients, each cell well under a minute).

Every check prints one PASS/FAIL line with its measured values so the whole
gate can be audited from the test transcript; the assertion enforces the
same condition.
"""
import json
import statistics
from pathlib import Path

import numpy as np

from fedarena.attacks import AttackContext, TrapSetterParams, ipm, trapsetter
from fedarena.cli import main
from fedarena.data import synth_blobs
from fedarena.defenses import (
    AggregationRule,
    centered_clipping,
    krum,
    median,
    multi_krum,
    trimmed_mean,
)
from fedarena.federation import (
    ClientState,
    ClientUpdate,
    RoundConfig,
    RoundInfo,
    fedavg,
    local_update,
    sgd_delta,
)
from fedarena.model import Batch, ModelSpec, grad, init_weights, risk
from fedarena.numerics import Rng
from fedarena.scenarios import ExperimentSpec, TaskSpec, run_experiment, time_defenses

# Desk fixture shared by the trend checks: default 10-class blobs task,
# 30 clients, moderately heterogeneous shards.
DESK_ALPHA = 0.2
SEEDS = (0, 1, 2)

SMALL = ModelSpec("softmax_regression", 4, 3)


def _verdict(num: int, label: str, ok: bool, detail: str) -> bool:
    print(f"{'PASS' if ok else 'FAIL'} [{num:02d}] {label}: {detail}")
    return ok


def _small_ctx(attackers, benign, seed, shared_shard=False, local_steps=1):
    """Attack context over real blobs data with honest benign updates."""
    rng = Rng(seed)
    ds = synth_blobs(rng.substream("data"), classes=3, dim=4, per_class=40, spread=1.0)
    m = attackers + benign
    idx = np.arange(ds.n)
    shards = [Batch(ds.inputs[idx[i::m]], ds.labels[idx[i::m]]) for i in range(m)]
    if shared_shard:
        shards = [shards[0]] * m
    cfg = RoundConfig(
        local_steps=local_steps, batch_size=shards[0].size, lr=0.05, global_lr=1.0
    )
    w = init_weights(SMALL, rng.substream("init"))
    states = [
        ClientState(
            id=i,
            data=shards[i],
            momentum=np.zeros(SMALL.weight_dim),
            rng=rng.substream(f"client.{i}"),
        )
        for i in range(m)
    ]
    benign_updates, benign_momenta = [], []
    for st in states[attackers:]:
        benign_updates.append(local_update(SMALL, st, w, cfg))
        benign_momenta.append(st.momentum.copy())
    train = Batch(
        np.concatenate([states[i].data.inputs for i in range(attackers)]),
        np.concatenate([states[i].data.labels for i in range(attackers)]),
    )
    return AttackContext(
        round_index=0,
        w=w,
        spec=SMALL,
        cfg=cfg,
        num_clients=m,
        benign_updates=tuple(benign_updates),
        benign_momenta=tuple(benign_momenta),
        states=tuple(states[:attackers]),
        all_attacker_momenta={st.id: st.momentum.copy() for st in states[:attackers]},
        train=train,
        val=train,
        rng=rng.substream("attack"),
    )


def _updates(deltas, ids=None):
    ids = range(len(deltas)) if ids is None else ids
    return [
        ClientUpdate(client_id=i, delta=np.asarray(d, dtype=np.float64), sample_count=5)
        for i, d in zip(ids, deltas)
    ]


def _median_impact(seeds=SEEDS, **kw):
    kw.setdefault("alpha", DESK_ALPHA)
    imps = [run_experiment(ExperimentSpec(seed=s, **kw)).impact for s in seeds]
    return float(statistics.median(imps)), imps


# ------------------------------------------------------------ 1: algebra


def test_01_scaled_reversal_flips_the_aggregate(capsys):
    """With reversal strength above benign/attacker mass, the plain-mean
    aggregate anti-aligns with the mean benign update."""
    rng = np.random.default_rng(2026)
    worst = -np.inf
    for _ in range(50):
        m = int(rng.integers(4, 13))
        a = int(rng.integers(1, m - 1))
        b = m - a
        ctx = _small_ctx(attackers=a, benign=b, seed=int(rng.integers(1_000_000)))
        eps = (b / a) * float(rng.uniform(1.001, 4.0))
        crafted = ipm(ctx, epsilon=eps)
        agg = fedavg(list(ctx.benign_updates) + crafted)
        worst = max(worst, float(agg @ ctx.benign_delta_mean()))
    with capsys.disabled():
        ok = _verdict(
            1,
            "reversed-aggregate alignment",
            worst <= 1e-12,
            f"worst inner product {worst:.3e} over 50 configs (need <= 1e-12)",
        )
    assert ok


# ----------------------------------------------------------- 2: exactness


def test_02_trap_weight_reached_exactly_when_clients_agree(capsys):
    """Homogeneous shards, full-shard batches, one attacker, unit scaling:
    the plain-mean next global weight lands on the searched trap weight."""
    ctx = _small_ctx(attackers=1, benign=5, seed=3, shared_shard=True, local_steps=3)
    trace = []
    crafted = trapsetter(ctx, TrapSetterParams(zeta_lo=1.0, zeta_hi=1.0), trace=trace)
    agg = fedavg(list(ctx.benign_updates) + crafted)
    w_next = ctx.w - 1.0 * agg
    gap = float(np.max(np.abs(w_next - trace[0]["search"].w_hat)))
    with capsys.disabled():
        ok = _verdict(
            2,
            "trap-weight exactness",
            gap <= 1e-10,
            f"max coordinate gap {gap:.3e} (need <= 1e-10)",
        )
    assert ok


# ------------------------------------------------------------ 3: gradients


def test_03_gradients_match_central_differences(capsys):
    def central(spec, w, batch, h=1e-5):
        g = np.zeros_like(w)
        for i in range(w.size):
            wp, wm = w.copy(), w.copy()
            wp[i] += h
            wm[i] -= h
            g[i] = (risk(spec, wp, batch) - risk(spec, wm, batch)) / (2 * h)
        return g

    specs = [
        ModelSpec("softmax_regression", 6, 3),
        ModelSpec("mlp1", 6, 3, hidden_dim=5),
    ]
    worst = 0.0
    for spec in specs:
        for seed in range(20):
            rng = np.random.default_rng(1000 + seed)
            w = 0.5 * rng.normal(size=spec.weight_dim)
            batch = Batch(rng.normal(size=(12, 6)), rng.integers(0, 3, size=12))
            g = grad(spec, w, batch)
            fd = central(spec, w, batch)
            rel = float(
                np.max(np.abs(g - fd)) / max(float(np.max(np.abs(fd))), 1e-12)
            )
            worst = max(worst, rel)
    with capsys.disabled():
        ok = _verdict(
            3,
            "gradient fidelity",
            worst < 1e-4,
            f"worst relative error {worst:.3e} over both model kinds x 20 seeds "
            "(need < 1e-4)",
        )
    assert ok


# -------------------------------------------------------------- 4: oracles


def _krum_oracle(deltas, a):
    m = len(deltas)
    n = m - a - 2
    scores = []
    for i in range(m):
        sq = sorted(
            float(np.sum((deltas[j] - deltas[i]) ** 2)) for j in range(m) if j != i
        )
        scores.append(sum(sq[:n]))
    return min(range(m), key=lambda i: (scores[i], i))


def _multi_krum_oracle(deltas, a, c):
    pool = list(range(len(deltas)))
    chosen = []
    for _ in range(c):
        n = max(0, len(pool) - a - 2)
        scores = {}
        for i in pool:
            sq = sorted(
                float(np.sum((deltas[j] - deltas[i]) ** 2)) for j in pool if j != i
            )
            scores[i] = sum(sq[:n])
        best = min(pool, key=lambda i: (scores[i], i))
        chosen.append(best)
        pool.remove(best)
    return chosen


def test_04_selection_rules_match_brute_force_oracles(capsys):
    rng = np.random.default_rng(7)
    mismatches = 0
    for trial in range(200):
        m = int(rng.integers(3, 9))
        d = int(rng.integers(1, 6))
        scale = 10.0 ** float(rng.uniform(-2, 2))
        deltas = [scale * rng.normal(size=d) for _ in range(m)]
        ups = _updates(deltas)

        sorted_cols = np.sort(np.stack(deltas), axis=0)
        if m % 2:
            med_expect = sorted_cols[m // 2]
        else:
            med_expect = (sorted_cols[m // 2 - 1] + sorted_cols[m // 2]) / 2
        if not np.array_equal(median(ups).delta, med_expect):
            mismatches += 1

        k = int(rng.integers(0, (m - 1) // 2 + 1))
        # zero trim averages the submitted rows directly; otherwise the trim
        # happens on per-coordinate sorted columns
        source = np.stack(deltas) if k == 0 else sorted_cols[k : m - k]
        tm_expect = source.mean(axis=0)
        if not np.array_equal(trimmed_mean(ups, k).delta, tm_expect):
            mismatches += 1

        f = int(rng.integers(0, m - 2))
        best = _krum_oracle(deltas, f)
        out = krum(ups, f)
        if out.accepted_ids != (best,) or not np.array_equal(out.delta, deltas[best]):
            mismatches += 1

        c = int(rng.integers(1, m - f + 1))
        chosen = _multi_krum_oracle(deltas, f, c)  # selection order
        out = multi_krum(ups, f, c)
        mk_expect = np.stack([deltas[i] for i in chosen]).mean(axis=0)
        if out.accepted_ids != tuple(sorted(chosen)) or not np.array_equal(
            out.delta, mk_expect
        ):
            mismatches += 1
    with capsys.disabled():
        ok = _verdict(
            4,
            "selection-rule oracle equivalence",
            mismatches == 0,
            f"{mismatches} mismatches over 200 instances x 4 rules (need 0)",
        )
    assert ok


# ---------------------------------------------------------- 5: containment


def test_05_containment_and_clipping_contract_under_fuzz(capsys):
    rng = np.random.default_rng(11)
    names = ("median", "trimmed_mean", "krum", "multi_krum", "dnc", "signguard", "freqfed")
    cfg = RoundConfig(local_steps=1, batch_size=16, lr=0.05, global_lr=1.0)
    violations = 0
    for trial in range(100):
        m = int(rng.integers(4, 13))
        d = int(rng.integers(1, 9))
        deltas = rng.normal(size=(m, d)) * (10.0 ** rng.uniform(-3, 6, size=(m, 1)))
        planted = int(rng.integers(1, m // 2 + 1))
        deltas[:planted] = rng.choice([-1e6, 1e6], size=(planted, d))
        ups = _updates(list(deltas))
        info = RoundInfo(
            round_index=trial % 7,
            total_rounds=10,
            w=np.zeros(d),
            spec=SMALL,
            cfg=cfg,
            global_lr=1.0,
            rng=Rng(trial).substream("defense"),
        )
        for name in names:
            out = AggregationRule(name).aggregate(ups, info)
            kept = np.stack(
                [u.delta for u in ups if u.client_id in set(out.accepted_ids)]
            )
            lo, hi = kept.min(axis=0), kept.max(axis=0)
            if not (np.all(out.delta >= lo - 1e-9) and np.all(out.delta <= hi + 1e-9)):
                violations += 1

        center = rng.normal(size=d) * 10.0 ** float(rng.uniform(-2, 4))
        radius = float(10.0 ** rng.uniform(-2, 3))
        out = centered_clipping(ups, center, radius)
        # mean of contributions each within the radius ball stays in the ball
        if float(np.linalg.norm(out.delta - center)) > radius * (1 + 1e-12) + 1e-9:
            violations += 1

    # containment for the reference-gated rule, on task-shaped vectors
    rng2 = Rng(99)
    ds = synth_blobs(rng2.substream("data"), classes=3, dim=4, per_class=20, spread=1.0)
    ref = Batch(ds.inputs[:30], ds.labels[:30])
    w = init_weights(SMALL, rng2.substream("init"))
    info = RoundInfo(
        round_index=0, total_rounds=10, w=w, spec=SMALL, cfg=cfg, global_lr=1.0,
        rng=rng2.substream("defense"),
    )
    d_ref = sgd_delta(
        SMALL, w, ref, cfg.local_steps, cfg.lr, cfg.batch_size,
        info.rng.substream("balance.0"),
    )
    near = [d_ref * s for s in (0.9, 1.0, 1.1)] + [1e6 * np.ones(SMALL.weight_dim)]
    out = AggregationRule("balance", reference=ref).aggregate(_updates(near), info)
    kept = np.stack([near[i] for i in out.accepted_ids])
    lo, hi = kept.min(axis=0), kept.max(axis=0)
    if not (np.all(out.delta >= lo - 1e-9) and np.all(out.delta <= hi + 1e-9)):
        violations += 1

    with capsys.disabled():
        ok = _verdict(
            5,
            "containment + clipping contract",
            violations == 0,
            f"{violations} violations over 100 fuzzed sets incl. +/-1e6 rows (need 0)",
        )
    assert ok


# -------------------------------------------------------- 6: clean baseline


def test_06_clean_baseline_reaches_095(capsys):
    peaks = []
    for s in SEEDS:
        rep = run_experiment(ExperimentSpec(rounds=50, seed=s, alpha=DESK_ALPHA))
        peaks.append(max(rep.clean_accuracy))
    with capsys.disabled():
        ok = _verdict(
            6,
            "clean baseline",
            all(p >= 0.95 for p in peaks),
            f"peak accuracies {[f'{p:.3f}' for p in peaks]} within 50 rounds "
            "(need >= 0.95 each)",
        )
    assert ok


# ------------------------------------------------- 7: sign-flip containment


def test_07_sign_flip_breaks_plain_mean_but_not_hybrids(capsys):
    common = dict(rounds=30, ratio=0.3, attacks=("sf",))
    plain, _ = _median_impact(defense="fedavg", **common)
    nr, _ = _median_impact(defense="hybrid_nr", **common)
    rr, _ = _median_impact(defense="hybrid_r", **common)
    okay = plain >= 0.30 and nr <= 0.10 and rr <= 0.10
    with capsys.disabled():
        ok = _verdict(
            7,
            "sign-flip containment",
            okay,
            f"median impact fedavg {plain:.3f} (>= 0.30), "
            f"hybrid_nr {nr:.3f} (<= 0.10), hybrid_r {rr:.3f} (<= 0.10)",
        )
    assert ok


# ------------------------------------- 8: combined attack vs freq clustering


def test_08_combined_attack_leaks_through_frequency_clustering(capsys):
    """Run concurrently, the masked label-flip group hides inside the
    low-frequency majority cluster while the reversal group distracts it;
    the pair must hurt more than the better-filtered single attack, and the
    risk-selection hybrid must still contain the pair."""
    ap = {"neurotoxin": {"omega": 0.99}}
    common = dict(rounds=30, ratio=0.4, attack_params=ap)
    nt, _ = _median_impact(attacks=("neurotoxin",), defense="freqfed", **common)
    rev, _ = _median_impact(attacks=("ipm",), defense="freqfed", **common)
    pair, _ = _median_impact(
        attacks=("neurotoxin", "ipm"), scenario="s2", defense="freqfed", **common
    )
    contained, _ = _median_impact(
        attacks=("neurotoxin", "ipm"), scenario="s2", defense="hybrid_r", **common
    )
    floor = min(nt, rev) + 0.05
    okay = pair > floor and contained <= 0.10
    with capsys.disabled():
        ok = _verdict(
            8,
            "combined-attack clustering failure",
            okay,
            f"median impact pair {pair:.3f} > min(single {nt:.3f}, {rev:.3f}) + 0.05 "
            f"= {floor:.3f}; hybrid_r {contained:.3f} (<= 0.10)",
        )
    assert ok


# ------------------------------------------- 9: trap attack vs risk hybrid


def test_09_trap_attack_outdamages_overt_attacks_under_risk_hybrid(capsys):
    """On the non-convex desk model the trap search finds nearby low-accuracy
    weights whose crafted updates pass the filters that stop overt attacks."""
    common = dict(rounds=30, ratio=0.4, defense="hybrid_r", model_kind="mlp1")
    trap, _ = _median_impact(attacks=("trapsetter",), **common)
    rev, _ = _median_impact(attacks=("ipm",), **common)
    flip, _ = _median_impact(attacks=("sf",), **common)
    okay = trap >= rev + 0.03 and trap >= flip + 0.03
    with capsys.disabled():
        ok = _verdict(
            9,
            "trap-attack superiority",
            okay,
            f"median impact trapsetter {trap:.3f} vs ipm {rev:.3f} + 0.03 and "
            f"sf {flip:.3f} + 0.03",
        )
    assert ok


# --------------------------------------------- 10: reference-size trend


def test_10_bigger_reference_defends_at_least_as_well(capsys):
    common = dict(rounds=30, ratio=0.4, attacks=("ipm",), defense="balance")
    big, _ = _median_impact(ref_size=200, **common)
    small, _ = _median_impact(ref_size=25, **common)
    with capsys.disabled():
        ok = _verdict(
            10,
            "reference-size trend",
            big <= small,
            f"median impact ref=200 {big:.4f} <= ref=25 {small:.4f}",
        )
    assert ok


# ------------------------------------------------------- 11: timing order


def test_11_timing_order_cascade_and_selection(capsys):
    spec = ExperimentSpec(task=TaskSpec(dim=1000), clients=30, rounds=1)
    wanted = [
        "fedavg",
        "krum",
        "centered_clipping",
        "signguard",
        "freqfed",
        "dnc",
        "trimmed_mean",
        "multi_krum",
        "hybrid_nr",
    ]
    table = time_defenses(spec, defenses=wanted, calls=10)
    members = (
        "centered_clipping", "signguard", "freqfed", "dnc", "trimmed_mean",
        "multi_krum",
    )
    slowest = max(table[m] for m in members)
    okay = table["hybrid_nr"] >= slowest and table["fedavg"] < table["krum"]
    with capsys.disabled():
        ok = _verdict(
            11,
            "timing order",
            okay,
            f"hybrid_nr {table['hybrid_nr']*1e3:.2f} ms >= slowest member "
            f"{slowest*1e3:.2f} ms; fedavg {table['fedavg']*1e3:.2f} ms < "
            f"krum {table['krum']*1e3:.2f} ms (M=30, d=10010)",
        )
    assert ok


# -------------------------------------------------------- 12: determinism


CONFIG = """\
[task]
kind = blobs
classes = 10
dim = 12
per_class = 120
test_per_class = 30

[federation]
clients = 30
rounds = 6
alpha = 0.2

[scenario]
kind = single
ratio = 0.3
attacks = sf
psi_window = 4

[defense]
rule = trimmed_mean

[run]
seeds = 0, 1
"""


def test_12_rerun_is_byte_identical(capsys, tmp_path):
    cfg = tmp_path / "cell.ini"
    cfg.write_text(CONFIG)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["run", str(cfg), "--output", str(out)]) == 0
        outs.append(out)
    same = {
        fname: (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()
        for fname in ("rounds.jsonl", "summary.csv", "manifest.json")
    }
    rows = (outs[0] / "rounds.jsonl").read_text().splitlines()
    parsed = all(isinstance(json.loads(line), dict) for line in rows)
    with capsys.disabled():
        ok = _verdict(
            12,
            "byte determinism",
            all(same.values()) and parsed,
            f"identical bytes across reruns: {same} ({len(rows)} round rows)",
        )
    assert ok
