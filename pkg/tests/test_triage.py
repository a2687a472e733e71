import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from triagenet import diffcore as dc
from triagenet import nets
from triagenet import triage as tr
from triagenet.triage import Category


def brute_agreement(preds):
    best = 0
    for c in set(preds):
        best = max(best, sum(1 for p in preds if p == c))
    return best / len(preds)


# --- clips and agreement -----------------------------------------------------------

def test_split_even():
    assert tr.split_clips(64, 4) == [range(0, 16), range(16, 32), range(32, 48), range(48, 64)]


def test_split_remainder_to_earliest():
    assert [len(r) for r in tr.split_clips(10, 4)] == [3, 3, 2, 2]
    assert tr.split_clips(4, 4) == [range(i, i + 1) for i in range(4)]


def test_split_too_short():
    with pytest.raises(ValueError):
        tr.split_clips(3, 4)


@given(T=st.integers(1, 500), data=st.data())
def test_split_covers_contiguously(T, data):
    m = data.draw(st.integers(1, T))
    clips = tr.split_clips(T, m)
    assert [i for r in clips for i in r] == list(range(T))
    sizes = [len(r) for r in clips]
    assert max(sizes) - min(sizes) <= 1 and sizes == sorted(sizes, reverse=True)


def test_agreement_worked_case():
    assert tr.agreement(["Neutral", "Surprise", "Happy", "Happy"]) == 0.5
    assert tr.agreement(["Happy"] * 4) == 1.0


def test_agreement_exhaustive_four_clips_seven_classes():
    tuples = list(itertools.product(range(7), repeat=4))
    assert len(tuples) == 2401
    assert all(tr.agreement(t) == brute_agreement(t) for t in tuples)


def test_agreement_empty():
    with pytest.raises(ValueError):
        tr.agreement([])


@given(st.lists(st.integers(0, 6), min_size=1, max_size=12), st.randoms())
def test_agreement_levels_and_permutation_invariance(preds, rnd):
    a = tr.agreement(preds)
    m = len(preds)
    assert any(math.isclose(a, j / m) for j in range(1, m + 1))
    shuffled = list(preds)
    rnd.shuffle(shuffled)
    assert tr.agreement(shuffled) == a


# --- assignment ------------------------------------------------------------------

def rec(i, a, loss):
    return tr.AgreementRecord(i, [], a, loss)


def test_assign_worked_example():
    agreements = [0.25, 0.25, 1, 1, 1, 1, 1, 1, 1, 1]
    losses = [0.3, 0.2, 0.1, 0.5, 2.5, 0.4, 0.9, 0.3, 0.2, 0.6]
    out = tr.assign_triage([rec(i, a, l) for i, (a, l) in enumerate(zip(agreements, losses))],
                           tr.TriageConfig())
    cats = [a.category for a in out]
    assert cats[:2] == [Category.HARD] * 2
    assert cats[4] == Category.NOISY
    assert cats.count(Category.NOISY) == 1 and cats.count(Category.HARD) == 2
    assert [a.lam for a in out][:2] == [1.5, 1.5] and out[4].lam == 0.0


def test_assign_disabled_thresholds():
    cfg = tr.TriageConfig(t_hard=0.0, t_noisy=0.0)
    out = tr.assign_triage([rec(i, 1.0, float(i)) for i in range(7)], cfg)
    assert all(a.category == Category.ORDINARY and a.lam == 1.0 for a in out)


def test_assign_all_unanimous_hard_by_highest_loss():
    losses = [0.5, 3.0, 1.0, 2.0, 0.1, 0.7, 1.5, 0.2, 0.3, 0.4]
    out = tr.assign_triage([rec(i, 1.0, l) for i, l in enumerate(losses)], tr.TriageConfig())
    hard = {a.sample_id for a in out if a.category == Category.HARD}
    noisy = {a.sample_id for a in out if a.category == Category.NOISY}
    assert hard == {1, 3}  # two highest losses
    assert noisy == {6}  # next highest among the rest


def test_assign_ties_break_by_id():
    out = tr.assign_triage([rec(i, 0.5, 1.0) for i in range(10)], tr.TriageConfig())
    assert {a.sample_id for a in out if a.category == Category.HARD} == {0, 1}
    assert {a.sample_id for a in out if a.category == Category.NOISY} == {2}


def test_assign_errors():
    with pytest.raises(ValueError):
        tr.assign_triage([], tr.TriageConfig())
    with pytest.raises(ValueError):
        tr.assign_triage([rec(1, 1.0, 0.0), rec(1, 0.5, 0.0)], tr.TriageConfig())


def test_config_validation():
    for bad in (dict(m=1), dict(t_hard=0.7, t_noisy=0.4), dict(t_hard=-0.1), dict(lambda_hard=-1)):
        with pytest.raises(ValueError):
            tr.TriageConfig(**bad)


records_st = st.lists(
    st.tuples(st.sampled_from([0.25, 0.5, 0.75, 1.0]), st.floats(0, 10, allow_nan=False)),
    min_size=1, max_size=60)
frac = st.floats(0, 0.5)


@given(records_st, frac, frac)
def test_assign_invariants(rows, th, tn):
    cfg = tr.TriageConfig(t_hard=th, t_noisy=tn)
    records = [rec(i, a, l) for i, (a, l) in enumerate(rows)]
    out = tr.assign_triage(records, cfg)
    n = len(records)
    hard = [a for a in out if a.category == Category.HARD]
    noisy = [a for a in out if a.category == Category.NOISY]
    assert len(hard) == math.floor(th * n + 1e-9)
    assert len(noisy) <= math.floor(tn * n + 1e-9)
    assert not {a.sample_id for a in hard} & {a.sample_id for a in noisy}
    assert all(a.lam == cfg.lam(a.category) for a in out)
    top = max(a for a, _ in rows)
    assert all(records[a.sample_id].agreement == top for a in noisy)
    # pure function: same input, same output; permuting the input permutes the output
    assert tr.assign_triage(records, cfg) == out
    by_id = {a.sample_id: a for a in out}
    assert {a.sample_id: a for a in tr.assign_triage(records[::-1], cfg)} == by_id


@given(records_st, st.data())
def test_noisy_monotone_in_own_loss(rows, data):
    cfg = tr.TriageConfig()
    records = [rec(i, a, l) for i, (a, l) in enumerate(rows)]
    out = tr.assign_triage(records, cfg)
    noisy = [a.sample_id for a in out if a.category == Category.NOISY]
    if not noisy:
        return
    j = data.draw(st.sampled_from(noisy))
    bump = data.draw(st.floats(0, 5))
    records[j] = rec(j, records[j].agreement, records[j].loss + bump)
    assert tr.assign_triage(records, cfg)[j].category == Category.NOISY


def test_big_loss_baseline():
    records = [rec(i, 1.0, l) for i, l in enumerate([0.1, 5.0, 0.3, 4.0, 0.2])]
    up = tr.assign_big_loss(records, 0.4, 1.5)
    assert [a.lam for a in up] == [1.0, 1.5, 1.0, 1.5, 1.0]
    down = tr.assign_big_loss(records, 0.4, 0.5)
    assert [a.category for a in down][1] == Category.NOISY and down[1].lam == 0.5


# --- loss reweighting ---------------------------------------------------------------

def test_reweighted_values():
    cfg = tr.TriageConfig()
    ce = dc.DiffArray(2.0)
    hard = tr.TriageAssignment(0, Category.HARD, cfg.lambda_hard)
    assert tr.reweighted_loss(ce, hard).item() == 3.0
    noisy = tr.TriageAssignment(0, Category.NOISY, cfg.lambda_noisy)
    assert tr.reweighted_loss(dc.DiffArray(7.3), noisy).item() == 0.0
    ordinary = tr.TriageAssignment(0, Category.ORDINARY, cfg.lambda_ordinary)
    assert tr.reweighted_loss(dc.DiffArray(1.25), ordinary).item() == 1.25


TINY = nets.ModelConfig(frame_dim=3, hidden_dim=2, classes=3, frames_in=4, n1=2, n2=2,
                        detect_frames=4, summary_dim=2)


def per_sample_grads(params, frames, labels, assignments):
    """Sum of per-sample reweighted losses, each sample on its own forward."""
    with dc.Tape() as tape:
        total = None
        for x, y, a in zip(frames, labels, assignments):
            out = nets.forward(x[None], params, TINY, soft=True)
            ce = dc.reshape(dc.smoothed_cross_entropy(out.logits, np.array([y]), 0.1), ())
            term = tr.reweighted_loss(ce, a)
            total = term if total is None else dc.add(total, term)
    grads = tape.backward(total)
    return {k: grads[v] for k, v in params.items()}


def test_noisy_sample_sends_zero_gradient():
    params = nets.init_params(TINY, 0)
    x = np.random.default_rng(0).standard_normal((1, 8, 3))
    g = per_sample_grads(params, x, [1], [tr.TriageAssignment(0, Category.NOISY, 0.0)])
    assert all(np.all(v == 0.0) for v in g.values())


def test_zero_lambda_bit_identical_to_deletion():
    params = nets.init_params(TINY, 1)
    rng = np.random.default_rng(1)
    frames = rng.standard_normal((5, 8, 3))
    labels = [0, 2, 1, 1, 0]
    cats = [Category.ORDINARY, Category.NOISY, Category.HARD, Category.NOISY, Category.ORDINARY]
    cfg = tr.TriageConfig()
    assigns = [tr.TriageAssignment(i, c, cfg.lam(c)) for i, c in enumerate(cats)]
    keep = [i for i, c in enumerate(cats) if c != Category.NOISY]
    full = per_sample_grads(params, frames, labels, assigns)
    deleted = per_sample_grads(params, frames[keep], [labels[i] for i in keep],
                               [assigns[i] for i in keep])
    assert all(np.array_equal(full[k], deleted[k]) for k in full)


# --- report CSV ---------------------------------------------------------------------

def test_csv_round_trip(tmp_path):
    records = [tr.make_record(i, p, l, epoch=3) for i, (p, l) in
               enumerate([([0, 0, 1, 2], 0.123456789), ([1, 1, 1, 1], 2.5), ([2, 2, 0, 0], 1e-7)])]
    assigns = tr.assign_triage(records, tr.TriageConfig(t_hard=0.34, t_noisy=0.34))
    path = tmp_path / "t.csv"
    tr.write_triage_csv(path, records, assigns, {0: "Clean", 1: "InjectedNoisy", 2: "InjectedHard"})
    back_r, back_a, kinds = tr.read_triage_csv(path)
    assert back_r == records and back_a == assigns
    assert kinds == {0: "Clean", 1: "InjectedNoisy", 2: "InjectedHard"}
    assert path.read_text().splitlines()[0] == ",".join(tr.REPORT_COLUMNS)
