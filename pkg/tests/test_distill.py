import numpy as np
import pytest

from chainrft import actors as ac
from chainrft import distill
from chainrft import policy as pol
from chainrft import taskenv as te
from chainrft.actors import CANDIDATE_STREAM_SEED


def zero_policy(hidden=8):
    """All-zero weights: exactly uniform over any candidate set."""
    n = 2 * (hidden * pol.DEFAULT_LAYOUT.total_dim + 2 * hidden + 1)
    return pol.unflatten(np.zeros(n), pol.DEFAULT_LAYOUT, hidden)


# ------------------------------------------------------------- synthesis


def test_synthesis_soundness(vanilla_policy, target_questions):
    ds = distill.synthesize_traces(vanilla_policy, target_questions, seed=13)
    assert len(ds) == len(target_questions)
    by_id = {q.id: q for q in target_questions}
    for rec in ds.records:
        q = by_id[rec.question_id]
        assert rec.letter == q.gold_letter
        assert 1 <= rec.attempts_used <= 64
        if rec.fallback:
            assert rec.claims == ()
            assert rec.attempts_used == 64
        else:
            # every claim was actually offered at its step
            for t, claim in enumerate(rec.claims, start=1):
                cands = te.candidate_steps(q, t, CANDIDATE_STREAM_SEED)
                assert claim in cands.candidates
            s = te.replay(q, rec.claims, rec.letter)
            assert te.extract_letter(te.serialize_trace(q, s)) == q.gold_letter


def test_synthesis_deterministic(vanilla_policy, target_questions):
    a = distill.synthesize_traces(vanilla_policy, target_questions[:8], seed=13)
    b = distill.synthesize_traces(vanilla_policy, target_questions[:8], seed=13)
    assert a.records == b.records


def test_adversarial_policy_all_fallback(monkeypatch, target_questions):
    """A teacher that always answers the same wrong letter: every question
    exhausts its attempt budget and falls back to the bare gold answer."""
    questions = [q for q in target_questions if q.gold_letter != "A"][:6]
    assert questions
    monkeypatch.setattr(distill, "SamplingActor",
                        lambda p, t, icl_fn=None: ac.FixedLetterActor("A"))
    ds = distill.synthesize_traces(zero_policy(), questions, seed=0)
    assert all(r.fallback for r in ds.records)
    assert all(r.attempts_used == 64 for r in ds.records)
    assert all(r.claims == () for r in ds.records)
    assert all(r.letter == q.gold_letter
               for r, q in zip(ds.records, questions))
    assert ds.fallback_fraction() == 1.0


def test_uniform_policy_fallback_rate_monte_carlo():
    """Uniform answers succeed per attempt w.p. 1/4, so the fallback rate
    after 64 attempts is (3/4)^64, indistinguishable from zero at n=1000."""
    spec = te.target_spec(num_steps=1)
    questions = te.generate_dataset(spec, 1000, seed=9)
    ds = distill.synthesize_traces(zero_policy(), questions, seed=3)
    expected = 0.75 ** 64
    assert abs(ds.fallback_fraction() - expected) < 0.02
    # attempt counts should look geometric(1/4): mean 4, here within 3 sigma
    attempts = [r.attempts_used for r in ds.records if not r.fallback]
    assert abs(np.mean(attempts) - 4.0) < 3 * np.sqrt(12.0 / len(attempts))


def test_max_attempts_validation(vanilla_policy, target_questions):
    with pytest.raises(ValueError):
        distill.synthesize_traces(vanilla_policy, target_questions[:1],
                                  max_attempts=0)


def test_oracle_traces(target_questions):
    ds = distill.oracle_traces(target_questions)
    for rec, q in zip(ds.records, target_questions):
        assert rec.claims == q.intermediates
        assert rec.letter == q.gold_letter
        assert rec.attempts_used == 1 and not rec.fallback


# ------------------------------------------------------------ mismatched


def test_project_claim_tie_break():
    assert distill.project_claim(10, [8, 12, 20, 30]) == 8  # tie -> smaller
    assert distill.project_claim(11, [8, 12, 20, 30]) == 12
    assert distill.project_claim(-5, [8, 12, 20, 30]) == 8


def test_mismatched_g1_is_oracle(target_questions):
    got = distill.synthesize_mismatched(1, target_questions)
    want = distill.oracle_traces(target_questions)
    assert got.records == want.records


def test_mismatched_g2_coarse_traces(target_questions):
    ds = distill.synthesize_mismatched(2, target_questions)
    diverged = 0
    for rec, q in zip(ds.records, target_questions):
        assert rec.letter == q.gold_letter
        k = q.num_steps
        assert len(rec.claims) == -(-k // 2)  # ceil(k / g)
        for j, claim in enumerate(rec.claims, start=1):
            cands = te.candidate_steps(q, j, CANDIDATE_STREAM_SEED)
            assert claim in cands.candidates
        if rec.claims[: k] != q.intermediates[: len(rec.claims)]:
            diverged += 1
    # the coarse teacher's claims land off the true step values most of the time
    assert diverged > len(target_questions) // 2


def test_mismatched_granularity_validation(target_questions):
    with pytest.raises(ValueError):
        distill.synthesize_mismatched(0, target_questions)


# ------------------------------------------------------------------ loss


def test_sft_loss_uniform_hand_value():
    """One step among 4 candidates plus one letter among 4: 2 log 4."""
    spec = te.target_spec(num_steps=1)
    q = te.generate_dataset(spec, 1, seed=1)[0]
    rec = distill.oracle_traces([q]).records[0]
    loss = distill.sft_loss(zero_policy(), q, rec)
    assert loss == pytest.approx(2 * np.log(4), abs=1e-9)


def test_sft_loss_fallback_only_letter_term():
    spec = te.target_spec(num_steps=3)
    q = te.generate_dataset(spec, 1, seed=2)[0]
    rec = distill.ProcessRecord(q.id, (), q.gold_letter, 64, True)
    loss = distill.sft_loss(zero_policy(), q, rec)
    assert loss == pytest.approx(np.log(4), abs=1e-9)


def test_sft_grad_finite_difference(small_question):
    q = small_question
    rec = distill.oracle_traces([q]).records[0]
    p = pol.init_params(5, hidden=6)
    g = distill.sft_grad(p, q, rec)
    flat = p.flatten()
    rng = np.random.default_rng(1)
    eps = 1e-6
    for i in rng.choice(len(flat), size=30, replace=False):
        up, down = flat.copy(), flat.copy()
        up[i] += eps
        down[i] -= eps
        fd = (distill.sft_loss(pol.unflatten(up, p.layout, 6), q, rec)
              - distill.sft_loss(pol.unflatten(down, p.layout, 6), q, rec)) / (2 * eps)
        denom = max(1.0, abs(fd))
        assert abs(fd - g[i]) / denom < 1e-4


# -------------------------------------------------------------- training


def test_sft_train_empty_dataset_identity(vanilla_policy, target_questions):
    p, hist = distill.sft_train(vanilla_policy, distill.ProcessDataset(),
                                target_questions)
    assert np.array_equal(p.flatten(), vanilla_policy.flatten())
    assert hist["epoch_loss"] == []
    assert "warning" in hist


def test_sft_train_overfits_single_record(vanilla_policy):
    q = te.generate_dataset(te.target_spec(), 1, seed=8)[0]
    ds = distill.oracle_traces([q])
    cfg = distill.SftConfig(learning_rate=3e-2, epochs=500, batch_size=1)
    p, hist = distill.sft_train(vanilla_policy, ds, [q], cfg)
    assert hist["epoch_loss"][-1] < 0.2 < hist["epoch_loss"][0]
    for s, offered, action in distill.record_decision_points(q, ds.records[0]):
        dist = pol.action_distribution(p, q, s, offered, temperature=1.0)
        assert dist.prob_of(action) > 0.95


def test_sft_train_deterministic(vanilla_policy, target_questions):
    ds = distill.oracle_traces(target_questions[:6])
    cfg = distill.SftConfig(learning_rate=0.05, epochs=3, batch_size=2,
                            shuffle_seed=4)
    a, _ = distill.sft_train(vanilla_policy, ds, target_questions[:6], cfg)
    b, _ = distill.sft_train(vanilla_policy, ds, target_questions[:6], cfg)
    assert np.array_equal(a.flatten(), b.flatten())
    c, _ = distill.sft_train(vanilla_policy, ds, target_questions[:6],
                             distill.SftConfig(learning_rate=0.05, epochs=3,
                                               batch_size=2, shuffle_seed=5))
    assert not np.array_equal(a.flatten(), c.flatten())


def test_sft_train_reduces_loss_on_oracle_data(vanilla_policy, target_questions):
    ds = distill.oracle_traces(target_questions)
    cfg = distill.SftConfig(learning_rate=0.02, epochs=6, batch_size=8)
    _, hist = distill.sft_train(vanilla_policy, ds, target_questions, cfg)
    losses = hist["epoch_loss"]
    assert losses[-1] < losses[0]


# --------------------------------------------------------------- file io


def test_process_dataset_round_trip(tmp_path, target_questions):
    ds = distill.oracle_traces(target_questions[:5])
    ds.records[0] = distill.ProcessRecord(
        ds.records[0].question_id, (), "B", 64, True)
    path = tmp_path / "traces.jsonl"
    distill.write_process_dataset(path, ds)
    back = distill.read_process_dataset(path)
    assert back.records == ds.records
