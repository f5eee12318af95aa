"""Experiment runner: adaptation, fixed-proposal inference, PMMH, selfcheck.

Configuration is a flat ``key = value`` text file; every key can also be
overridden on the command line as ``--key value``.  Unknown keys are
rejected by name.  All outputs are CSV (plus a key-value summary for PMMH)
and are bit-reproducible given (config, seed).

Exit codes: 0 success, 1 usage/config error, 2 runtime/numerical error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .adapt import AdaptConfig, run_adaptation, write_diagnostics_csv
from .metrics import kalman_filter, rmse, summarize
from .models import BenchmarkNssm, LinearGaussianSsm, simulate
from .pmmh import PmmhConfig, run_pmmh, save_trace_csv
from .prng import stream_for
from .proposals import (
    ProposalVariant,
    make_proposal,
    load_proposal,
    save_proposal,
)
from .smc import SmcConfig, run_smc

# key -> (type, default); bools use 0/1
_COMMON = {
    "seed": (int, 42),
    "sigma_v": (float, float(np.sqrt(10.0))),
    "sigma_w": (float, 1.0),
    "n_particles": (int, 100),
    "seq_len": (int, 200),
}
_SCHEMAS = {
    "adapt": {
        **_COMMON,
        "variant": (str, "rnn-md-f"),
        "n_components": (int, 3),
        "iterations": (int, 200),
        "lr": (float, 1e-2),
        "mode": (str, "batch"),
        "heldout_sequences": (int, 20),
        "checkpoint_every": (int, 0),
    },
    "infer": {
        **_COMMON,
        "checkpoint": (str, "prior"),
        "n_sequences": (int, 10),
    },
    "pmmh": {
        **_COMMON,
        "variant": (str, "prior"),
        "n_components": (int, 3),
        "iterations": (int, 500),
        "pretrain_iters": (int, 0),
        "readapt_every": (int, 0),
        "readapt_particles": (int, 0),
        "rw_scale_v": (float, 0.15),
        "rw_scale_w": (float, 0.08),
        "theta_init_v": (float, 10.0),
        "theta_init_w": (float, 10.0),
        "seq_len": (int, 500),
    },
    "selfcheck": {"seed": (int, 42), "inject_gradient_fault": (int, 0)},
}

PAPER_SCALE = {"seq_len": 1000, "iterations": 1000}


class ConfigError(Exception):
    pass


def load_config(subcommand: str, config_path, overrides, paper_scale: bool) -> dict:
    schema = _SCHEMAS[subcommand]
    cfg = {k: default for k, (_, default) in schema.items()}
    explicit = set()

    def apply(key, raw, origin):
        if key not in schema:
            raise ConfigError(f"unknown config key {key!r} ({origin})")
        typ = schema[key][0]
        try:
            cfg[key] = typ(raw)
        except ValueError:
            raise ConfigError(f"bad value for {key!r}: {raw!r} ({origin})")
        explicit.add(key)

    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, raw = line.partition("=")
            apply(key.strip(), raw.strip(), f"{path}:{lineno}")
    for key, raw in overrides:
        apply(key, raw, "command line")
    if paper_scale:
        for key, value in PAPER_SCALE.items():
            if key in schema and key not in explicit:
                cfg[key] = value
    return cfg


def _benchmark(cfg) -> BenchmarkNssm:
    return BenchmarkNssm(sigma_v=cfg["sigma_v"], sigma_w=cfg["sigma_w"])


def _evaluate(model, proposal, cfg, n_sequences, seed_tag):
    """Fixed-proposal SMC over fresh sequences; returns per-sequence rows."""
    smc_cfg = SmcConfig(n_particles=cfg["n_particles"])
    rows = []
    traces = []
    for j in range(n_sequences):
        sim_rng = stream_for(cfg["seed"], seed_tag, "sim", j)
        z_true, x = simulate(model, cfg["seq_len"], sim_rng)
        res = run_smc(model, proposal, x, smc_cfg,
                      stream_for(cfg["seed"], seed_tag, "smc", j))
        rows.append(
            {
                "sequence_id": j,
                "lml": res.log_marginal_likelihood(),
                "rmse": rmse(z_true, np.array(res.filtering_means)),
                "mean_ess": res.mean_ess(),
            }
        )
        traces.append(res.ess_trace)
    return rows, traces


def _write_eval_csvs(out, prefix, rows, traces):
    with open(out / f"{prefix}_summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sequence_id", "lml", "rmse", "mean_ess"])
        for r in rows:
            w.writerow([r["sequence_id"], repr(r["lml"]), repr(r["rmse"]),
                        repr(r["mean_ess"])])
    with open(out / f"{prefix}_ess_trace.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sequence_id", "t", "ess"])
        for j, tr in enumerate(traces):
            for t, e in enumerate(tr):
                w.writerow([j, t + 1, repr(e)])


def cmd_adapt(cfg, out: Path) -> int:
    model = _benchmark(cfg)
    variant = ProposalVariant.parse(cfg["variant"], n_components=cfg["n_components"])
    proposal = make_proposal(variant, model.dim_z, model.dim_x, seed=cfg["seed"])
    adapt_cfg = AdaptConfig(
        iterations=cfg["iterations"] if proposal.phi.size else 0,
        n_particles=cfg["n_particles"],
        seq_len=cfg["seq_len"],
        mode=cfg["mode"],
        lr=cfg["lr"],
        seed=cfg["seed"],
    )
    diagnostics = run_adaptation(adapt_cfg, model, proposal)
    write_diagnostics_csv(out / "diagnostics.csv", diagnostics)
    save_proposal(out / "checkpoint.txt", proposal)

    rows, traces = _evaluate(model, proposal, cfg, cfg["heldout_sequences"], "heldout")
    _write_eval_csvs(out, "heldout", rows, traces)
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "mean", "std", "count"])
        for metric in ("mean_ess", "lml", "rmse"):
            s = summarize(metric, [r[metric] for r in rows])
            w.writerow([metric, repr(s.mean), repr(s.std), s.count])
    return 0


def cmd_infer(cfg, out: Path) -> int:
    model = _benchmark(cfg)
    if cfg["checkpoint"] == "prior":
        proposal = make_proposal(ProposalVariant("prior"), model.dim_z, model.dim_x)
    else:
        path = Path(cfg["checkpoint"])
        if not path.exists():
            print(f"error: checkpoint not found: {path}", file=sys.stderr)
            return 1
        try:
            proposal = load_proposal(path)
        except (ValueError, IndexError) as e:
            print(f"error: corrupt checkpoint {path}: {e}", file=sys.stderr)
            return 1
    rows, traces = _evaluate(model, proposal, cfg, cfg["n_sequences"], "infer")
    _write_eval_csvs(out, "infer", rows, traces)
    return 0


def cmd_pmmh(cfg, out: Path) -> int:
    true_model = _benchmark(cfg)
    _, x = simulate(true_model, cfg["seq_len"], stream_for(cfg["seed"], "pmmh-data"))

    def factory(theta):
        return BenchmarkNssm(sigma_v=theta[0], sigma_w=theta[1])

    variant = ProposalVariant.parse(cfg["variant"], n_components=cfg["n_components"])
    proposal = make_proposal(variant, 1, 1, seed=cfg["seed"])
    if cfg["pretrain_iters"] > 0 and proposal.phi.size:
        init_model = factory((cfg["theta_init_v"], cfg["theta_init_w"]))
        run_adaptation(
            AdaptConfig(
                iterations=cfg["pretrain_iters"],
                n_particles=cfg["n_particles"],
                seq_len=cfg["seq_len"],
                seed=cfg["seed"],
            ),
            init_model,
            proposal,
        )
    pmmh_cfg = PmmhConfig(
        iterations=cfg["iterations"],
        n_particles=cfg["n_particles"],
        rw_scale=(cfg["rw_scale_v"], cfg["rw_scale_w"]),
        theta_init=(cfg["theta_init_v"], cfg["theta_init_w"]),
        readapt_every=cfg["readapt_every"],
        readapt_particles=cfg["readapt_particles"] or None,
        seed=cfg["seed"],
    )
    state, summary = run_pmmh(pmmh_cfg, factory, x, proposal=proposal)
    save_trace_csv(out / "pmmh_trace.csv", state)
    with open(out / "pmmh_summary.txt", "w") as f:
        for k, v in summary.items():
            f.write(f"{k} = {v!r}\n")
    return 0


# ---------------------------------------------------------------------------
# selfcheck


def _check_prng(seed):
    from .prng import RngStream

    s = RngStream(seed=seed, stream_id=0)
    u = s.uniforms(100_000)
    ok = 0.495 <= u.mean() <= 0.505
    a = RngStream(seed=seed, stream_id=1).uniforms(10_000)
    b = RngStream(seed=seed, stream_id=2).uniforms(10_000)
    ok &= abs(np.corrcoef(a, b)[0, 1]) < 0.05
    return ok


def _check_gradients(seed, inject_fault=False):
    from .nnet import finite_diff_grad
    from .prng import RngStream

    model = BenchmarkNssm(sigma_v=np.sqrt(10.0), sigma_w=1.0)
    variant = ProposalVariant("rnn", n_components=2, residual_f=True)
    prop = make_proposal(variant, 1, 1, hidden=5, seed=seed)
    rng = RngStream(seed=seed, stream_id=99)
    T, N = 3, 4
    _, x = simulate(model, T, rng.split("sim"))
    res = run_smc(model, prop, x, SmcConfig(n_particles=N), rng.split("smc"))

    def objective(phi_values):
        saved = prop.phi.values.copy()
        prop.phi.values[:] = phi_values
        prop.begin_sequence(N, T)
        total = 0.0
        for t in range(1, T + 1):
            z_prev = None if t == 1 else res.states[t - 2]
            if t > 1 and res.ancestors[t - 1] is not None:
                z_prev = z_prev[res.ancestors[t - 1]]
                prop.permute_states(res.ancestors[t - 1])
            prop.condition(model, x[t - 1], z_prev, t)
            logq = prop.score(res.states[t - 1])
            total += float(res.norm_w[t - 1] @ logq)
        prop.phi.values[:] = saved
        return total

    # replay the run's inputs exactly, then compare backward vs finite diffs
    prop.phi.zero_grad()
    objective(prop.phi.values.copy())
    prop.backward(res.norm_w, res.ancestors)
    analytic = prop.phi.grad.copy()
    if inject_fault:
        analytic[0] += 1.0
    numeric = finite_diff_grad(lambda v: objective(v), prop.phi.values.copy())
    denom = np.maximum(np.abs(numeric), 1e-3)
    return np.max(np.abs(analytic - numeric) / denom) < 1e-4


def _check_kalman(seed):
    model = LinearGaussianSsm(A=[[0.9]], C=[[1.0]], q_std=[0.7], r_std=[0.5],
                              m0=[0.0], p0_std=[1.0])
    _, x = simulate(model, 6, stream_for(seed, "kalman-check"))
    exact = kalman_filter(model, x).log_marginal_likelihood
    # dense joint-Gaussian oracle for the scalar model
    T = 6
    a, q2, p02 = 0.9, 0.7**2, 1.0
    Pz = np.zeros((T, T))
    var = np.zeros(T)
    var[0] = p02
    for t in range(1, T):
        var[t] = a**2 * var[t - 1] + q2
    for i in range(T):
        for j in range(T):
            Pz[i, j] = a ** abs(i - j) * var[min(i, j)]
    Px = Pz + 0.5**2 * np.eye(T)
    sign, logdet = np.linalg.slogdet(Px)
    xv = x[:, 0]
    brute = -0.5 * (T * np.log(2 * np.pi) + logdet + xv @ np.linalg.solve(Px, xv))
    return abs(exact - brute) < 1e-8


def _check_resampling(seed):
    from .smc import multinomial_resample

    w = np.array([0.5, 0.3, 0.2])
    counts = np.zeros(3)
    reps = 20_000
    rng = stream_for(seed, "resample-check")
    for _ in range(reps):
        counts += np.bincount(multinomial_resample(w, rng), minlength=3)
    freq = counts / (reps * 3)
    se = np.sqrt(w * (1 - w) / (reps * 3))
    return bool(np.all(np.abs(freq - w) < 3 * se))


def _check_ancestry(seed):
    model = BenchmarkNssm(sigma_v=np.sqrt(10.0), sigma_w=1.0)
    _, x = simulate(model, 8, stream_for(seed, "anc-sim"))
    prop = make_proposal(ProposalVariant("prior"), 1, 1)
    res = run_smc(model, prop, x, SmcConfig(n_particles=6),
                  stream_for(seed, "anc-smc"))
    # brute-force forward tracker: copy full paths at every resample
    paths = None
    for t in range(res.n_steps):
        if t == 0:
            paths = res.states[0][:, None, :].copy()
        else:
            if res.ancestors[t] is not None:
                paths = paths[res.ancestors[t]]
            paths = np.concatenate([paths, res.states[t][:, None, :]], axis=1)
    return all(np.array_equal(res.trajectory(n), paths[n]) for n in range(6))


def cmd_selfcheck(cfg, out: Path) -> int:
    checks = [
        ("prng moments and independence", lambda: _check_prng(cfg["seed"])),
        ("proposal gradient vs finite differences",
         lambda: _check_gradients(cfg["seed"],
                                  inject_fault=bool(cfg["inject_gradient_fault"]))),
        ("kalman filter vs dense Gaussian oracle", lambda: _check_kalman(cfg["seed"])),
        ("multinomial resampling moments", lambda: _check_resampling(cfg["seed"])),
        ("ancestry reconstruction", lambda: _check_ancestry(cfg["seed"])),
    ]
    failures = 0
    for name, fn in checks:
        try:
            ok = fn()
        except Exception as e:  # report, keep checking
            ok = False
            print(f"FAIL {name}: {e}")
        else:
            print(("PASS" if ok else "FAIL") + f" {name}")
        failures += not ok
    return 2 if failures else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="neuralsmc",
        description="Adaptive-proposal particle filtering experiments",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in _SCHEMAS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        p.add_argument("--out", default=".")
        p.add_argument("--paper-scale", action="store_true")
        p.add_argument("--set", nargs=2, action="append", default=[],
                       metavar=("KEY", "VALUE"),
                       help="override a config key")
        for key in _SCHEMAS[name]:
            p.add_argument(f"--{key}", default=None, metavar="VALUE")
    args = parser.parse_args(argv)

    try:
        overrides = list(args.set)
        for key in _SCHEMAS[args.subcommand]:
            v = getattr(args, key, None)
            if v is not None:
                overrides.append((key, v))
        cfg = load_config(args.subcommand, args.config, overrides, args.paper_scale)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    handler = {
        "adapt": cmd_adapt,
        "infer": cmd_infer,
        "pmmh": cmd_pmmh,
        "selfcheck": cmd_selfcheck,
    }[args.subcommand]
    try:
        return handler(cfg, out)
    except (ValueError, RuntimeError, np.linalg.LinAlgError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
