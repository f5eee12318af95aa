"""Tests for the proposal families and their gradients."""

import numpy as np
import pytest

from neuralsmc.models import BenchmarkNssm, nssm_f, simulate
from neuralsmc.nnet import finite_diff_grad
from neuralsmc.prng import RngStream, stream_for
from neuralsmc.proposals import (
    MlpProposal,
    PriorProposal,
    ProposalVariant,
    RnnProposal,
    load_proposal,
    make_proposal,
    save_proposal,
    time_features,
)
from neuralsmc.smc import SmcConfig, run_smc


def benchmark():
    return BenchmarkNssm(sigma_v=np.sqrt(10.0), sigma_w=1.0)


# --------------------------------------------------------------------------
# variants and labels


def test_variant_labels():
    assert ProposalVariant("prior").label == "prior"
    assert ProposalVariant("nn", 1, False).label == "nn"
    assert ProposalVariant("nn", 3, False).label == "nn-md"
    assert ProposalVariant("rnn", 3, True).label == "rnn-md-f"
    assert ProposalVariant("rnn", 1, True).label == "rnn-f"


def test_variant_parse_round_trip():
    for label in ("prior", "nn", "nn-md", "nn-md-f", "rnn", "rnn-f", "rnn-md-f"):
        assert ProposalVariant.parse(label).label == label


def test_variant_rejects_bad_family():
    with pytest.raises(ValueError):
        ProposalVariant("ukf")


# --------------------------------------------------------------------------
# state machine


def test_rnn_begin_sequence_zero_state():
    prop = make_proposal(ProposalVariant("rnn"), 1, 1, hidden=6)
    prop.begin_sequence(4, 10)
    assert prop.state.h.shape == (4, 6)
    assert not prop.state.h.any() and not prop.state.c.any()


def test_begin_sequence_is_idempotent_reset():
    prop = make_proposal(ProposalVariant("rnn"), 1, 1, hidden=4)
    model = benchmark()
    prop.begin_sequence(3, 5)
    prop.condition(model, np.array([0.5]), None, 1)
    h_after = prop.state.h.copy()
    assert h_after.any()
    prop.begin_sequence(3, 5)
    assert not prop.state.h.any()
    prop.condition(model, np.array([0.5]), None, 1)
    assert np.array_equal(prop.state.h, h_after)


def test_prior_family_has_no_parameters():
    prop = PriorProposal()
    assert prop.phi.size == 0


def test_sample_before_condition_errors():
    prop = PriorProposal()
    prop.begin_sequence(2, 3)
    with pytest.raises(RuntimeError):
        prop.sample(RngStream(seed=0))


def test_condition_before_begin_sequence_errors():
    prop = PriorProposal()
    with pytest.raises(RuntimeError):
        prop.condition(benchmark(), np.array([0.0]), None, 1)


# --------------------------------------------------------------------------
# densities


def test_prior_proposal_matches_model_density():
    model = benchmark()
    prop = PriorProposal()
    prop.begin_sequence(5, 4)
    z_prev = stream_for(0, "zprev").normals(5).reshape(5, 1)
    prop.condition(model, np.array([1.0]), z_prev, 3)
    z = stream_for(0, "z").normals(5).reshape(5, 1)
    logq = prop.score(z)
    assert np.max(np.abs(logq - model.log_trans(z, z_prev, 3))) < 1e-12


def test_condition_is_pure():
    model = benchmark()
    prop = make_proposal(ProposalVariant("nn", 2), 1, 1, hidden=8, seed=3)
    z_prev = np.array([[0.4], [-1.2]])
    prop.begin_sequence(2, 6)
    a = prop.condition(model, np.array([0.7]), z_prev, 2)
    prop.begin_sequence(2, 6)
    b = prop.condition(model, np.array([0.7]), z_prev, 2)
    assert np.array_equal(a.logits, b.logits)
    assert np.array_equal(a.means, b.means)
    assert np.array_equal(a.sigmas, b.sigmas)


def test_residual_f_zero_head_means_prior_dynamics():
    model = benchmark()
    prop = make_proposal(ProposalVariant("nn", 1, residual_f=True), 1, 1, hidden=8)
    # zero the mean head so the residual vanishes
    prop.phi.view("head.means.W")[:] = 0.0
    prop.phi.view("head.means.b")[:] = 0.0
    z_prev = np.array([[0.5], [2.0], [-3.0]])
    prop.begin_sequence(3, 5)
    params = prop.condition(model, np.array([0.1]), z_prev, 2)
    assert np.max(np.abs(params.means[:, 0, 0] - nssm_f(z_prev[:, 0], 2))) < 1e-12


def test_gauss_head_score_is_single_gaussian():
    prop = make_proposal(ProposalVariant("nn", 1), 1, 1, hidden=6, seed=1)
    prop.begin_sequence(2, 4)
    params = prop.condition(benchmark(), np.array([0.2]), np.zeros((2, 1)), 2)
    z = np.array([[0.3], [-0.4]])
    logq = prop.score(z)
    mu = params.means[:, 0, 0]
    sig = params.sigmas[:, 0, 0]
    direct = -0.5 * np.log(2 * np.pi) - np.log(sig) - 0.5 * ((z[:, 0] - mu) / sig) ** 2
    assert np.max(np.abs(logq - direct)) < 1e-12


def test_untrained_head_starts_unit_width():
    prop = make_proposal(ProposalVariant("rnn", 3), 1, 1, hidden=5, seed=2)
    prop.begin_sequence(4, 3)
    params = prop.condition(benchmark(), np.array([0.0]), None, 1)
    # rawstd weights start at zero, so sigma = softplus(b) + floor = 1 exactly
    assert np.max(np.abs(params.sigmas - 1.0)) < 1e-12


def test_score_is_finite_far_from_means():
    prop = make_proposal(ProposalVariant("rnn", 2), 1, 1, hidden=5, seed=4)
    prop.begin_sequence(1, 2)
    prop.condition(benchmark(), np.array([0.0]), None, 1)
    logq = prop.score(np.array([[1e3]]))
    assert np.isfinite(logq[0])


def test_time_features_shape():
    f = time_features(7, 100)
    assert f.shape == (3,)
    assert abs(f[0] - np.cos(8.4)) < 1e-12 and abs(f[2] - 0.07) < 1e-12


# --------------------------------------------------------------------------
# bootstrap equivalence through the engine


def test_prior_proposal_weights_reduce_to_observation_density():
    model = benchmark()
    _, x = simulate(model, 6, stream_for(0, "boot-sim"))
    res = run_smc(model, PriorProposal(), x, SmcConfig(n_particles=8),
                  stream_for(0, "boot-smc"))
    for t in range(res.n_steps):
        log_obs = model.log_obs(x[t], res.states[t], t + 1)
        w = np.exp(log_obs - np.log(np.sum(np.exp(log_obs))))
        assert np.max(np.abs(w - res.norm_w[t])) < 1e-12


# --------------------------------------------------------------------------
# gradients


def frozen_objective(prop, model, x, res):
    """Replay stored particles and weights; returns a function of phi."""

    def f(values):
        saved = prop.phi.values.copy()
        prop.phi.values[:] = values
        prop.begin_sequence(res.norm_w[0].shape[0], len(x))
        total = 0.0
        for t in range(1, res.n_steps + 1):
            z_prev = None if t == 1 else res.states[t - 2]
            if t > 1 and res.ancestors[t - 1] is not None:
                z_prev = z_prev[res.ancestors[t - 1]]
                prop.permute_states(res.ancestors[t - 1])
            prop.condition(model, x[t - 1], z_prev, t)
            logq = prop.score(res.states[t - 1])
            total += float(res.norm_w[t - 1] @ logq)
        prop.phi.values[:] = saved
        return total

    return f


@pytest.mark.parametrize("label", ["nn-md-f", "rnn-md", "rnn-md-f"])
def test_weighted_score_gradient_matches_finite_differences(label):
    model = benchmark()
    variant = ProposalVariant.parse(label, n_components=2)
    prop = make_proposal(variant, 1, 1, hidden=4, seed=5)
    _, x = simulate(model, 3, stream_for(1, "grad-sim"))
    res = run_smc(model, prop, x, SmcConfig(n_particles=3),
                  stream_for(1, "grad-smc"))
    f = frozen_objective(prop, model, x, res)
    prop.phi.zero_grad()
    f(prop.phi.values.copy())  # rebuild tapes on the replayed inputs
    prop.backward(res.norm_w, res.ancestors)
    analytic = prop.phi.grad.copy()
    numeric = finite_diff_grad(f, prop.phi.values.copy())
    denom = np.maximum(np.abs(numeric), 1e-4)
    assert np.max(np.abs(analytic - numeric) / denom) < 1e-4


def test_backward_step_matches_single_step_finite_differences():
    model = benchmark()
    prop = make_proposal(ProposalVariant("nn", 2), 1, 1, hidden=4, seed=6)
    _, x = simulate(model, 2, stream_for(2, "os-sim"))
    res = run_smc(model, prop, x, SmcConfig(n_particles=3),
                  stream_for(2, "os-smc"))
    t = 1  # second step only

    def f(values):
        saved = prop.phi.values.copy()
        prop.phi.values[:] = values
        prop.begin_sequence(3, 2)
        prop.condition(model, x[0], None, 1)
        prop.score(res.states[0])
        z_prev = res.states[0]
        if res.ancestors[1] is not None:
            z_prev = z_prev[res.ancestors[1]]
        prop.condition(model, x[1], z_prev, 2)
        logq = prop.score(res.states[1])
        prop.phi.values[:] = saved
        return float(res.norm_w[1] @ logq)

    prop.phi.zero_grad()
    f(prop.phi.values.copy())  # rebuilds both step caches
    prop.backward_step(t, res.norm_w[1])
    numeric = finite_diff_grad(f, prop.phi.values.copy())
    denom = np.maximum(np.abs(numeric), 1e-4)
    assert np.max(np.abs(prop.phi.grad - numeric) / denom) < 1e-4


# --------------------------------------------------------------------------
# checkpoints


@pytest.mark.parametrize("label", ["nn-md", "rnn-md-f"])
def test_proposal_checkpoint_round_trip(label, tmp_path):
    model = benchmark()
    prop = make_proposal(ProposalVariant.parse(label), 1, 1, seed=7)
    path = tmp_path / "prop.txt"
    save_proposal(path, prop)
    back = load_proposal(path)
    assert back.variant == prop.variant
    assert np.array_equal(back.phi.values, prop.phi.values)
    # identical draws under identical streams
    for p in (prop, back):
        p.begin_sequence(3, 4)
        p.condition(model, np.array([0.3]), None, 1)
    a = prop.sample(stream_for(0, "ckpt-draw"))
    b = back.sample(stream_for(0, "ckpt-draw"))
    assert np.array_equal(a, b)


def test_load_proposal_rejects_missing_header(tmp_path):
    path = tmp_path / "broken.txt"
    path.write_text("# family = rnn\nnot a header\n")
    with pytest.raises(ValueError):
        load_proposal(path)
