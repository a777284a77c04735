"""Command-line entry point: ``stobatch {train,train-dist,certify,attack-eval,account}``.

Exit codes: 0 on success, 1 on a runtime error raised by a library module,
2 on a malformed or incomplete configuration.
"""

from __future__ import annotations

import argparse
import logging
import math
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, run_attack
from .certify import DPScorer, RobustnessConfig, argmax_lowest, certify_batch, monte_carlo_expectation, write_cert_report
from .config import ConfigParseError, load_config
from .data import load_idx, normalize_signed, pool_images, synth_dataset
from .errors import StoBatchError
from .metrics import EvalReport, certified_accuracy, conventional_accuracy
from .nn import Network, load_checkpoint, save_checkpoint
from .noise import InferenceNoiseStream, NoiseGuard
from .objectives import PrivacyConfig, accountant, split_budget
from .rng import derive_seed
from .training import TrainingConfig, train_sequential, train_stobatch

log = logging.getLogger("stobatch")

COMMANDS = ("train", "train-dist", "certify", "attack-eval", "account")


# -- assembling module inputs from the config -------------------------------

def load_data(cfg):
    """Return ((X_train, y_train), (X_test, y_test)) with features in [-1, 1]."""
    dc = cfg["data"]
    if dc["source"] == "synthetic":
        n_tr, n_te = dc["n_train"], dc["n_test"]
        X, y = synth_dataset(n_tr + n_te, dc["d"], dc["classes"], derive_seed(cfg.seed, "data"),
                             dc["clusters_per_class"], dc["separation"], dc["spread"])
        return (X[:n_tr], y[:n_tr]), (X[n_tr:], y[n_tr:])
    if dc["source"] == "idx":
        out = []
        for img, lab in (("train_images", "train_labels"), ("test_images", "test_labels")):
            if not dc[img] or not dc[lab]:
                raise ConfigParseError(f"missing config key '{img if not dc[img] else lab}' in section [data]")
            X, y = load_idx(dc[img], dc[lab])
            X = normalize_signed(X)
            if dc["pool"] > 1:
                side = math.isqrt(X.shape[1])
                X = pool_images(X, side, dc["pool"])
            out.append((X, y.astype(np.int64)))
        return out[0], out[1]
    raise ConfigParseError(f"[data] source must be 'synthetic' or 'idx', got {dc['source']!r}")


def privacy_config(cfg, d):
    pc, tc, mc = cfg["privacy"], cfg["training"], cfg["model"]
    beta, h_pi = mc["beta"], mc["hidden"][-1]
    eps1 = pc["eps1"]
    if eps1 is None:
        if pc["eps"] is None:
            raise ConfigParseError("missing config key 'eps1' (or 'eps' with training.theta1_norm_cap) in section [privacy]")
        if tc["theta1_norm_cap"] is None:
            raise ConfigParseError("missing config key 'theta1_norm_cap' in section [training] (needed to split eps)")
        eps1 = split_budget(pc["eps"], pc["eps2"], d, beta, tc["m"], tc["theta1_norm_cap"])
    return PrivacyConfig(eps1, pc["eps2"], tc["m"], d, beta, h_pi)


def training_config(cfg, privacy):
    tc, ac = cfg["training"], cfg["attack"]
    attack = AttackConfig(mu=ac["mu"], steps=ac["steps"], decay=ac["decay"], kinds=ac["kinds"])
    return TrainingConfig(
        steps=tc["steps"], m=tc["m"], eps1=privacy.eps1, eps2=privacy.eps2,
        learning_rate=tc["learning_rate"], lr_theta1=tc["lr_theta1"], xi=tc["xi"],
        weight_decay=tc["weight_decay"], center_hidden_shift=tc["center_hidden_shift"],
        hidden_sizes=cfg["model"]["hidden"], attack=attack, mu_max=tc["mu_max"], trainers=tc["trainers"],
        seed=cfg.seed, theta1_norm_cap=tc["theta1_norm_cap"], clip_mode=tc["clip_mode"], loss=tc["loss"],
        workers=tc["workers"],
    )


def robustness_config(cfg):
    c = cfg["certify"]
    return RobustnessConfig(n=c["n"], eta=c["eta"], psi=c["psi"], grid_lo=c["grid_lo"], grid_hi=c["grid_hi"],
                            grid_points=c["grid_points"], mu_for_sensitivity=c["mu_for_sensitivity"],
                            seed=derive_seed(cfg.seed, "certify"))


def report_header(cfg, report):
    return [f"config_hash = {cfg.digest()}", f"seed = {cfg.seed}"] + report.to_text().splitlines()


def _latest_checkpoint(out):
    found = []
    for p in Path(out).glob("model_*.sbck"):
        m = re.fullmatch(r"model_(\d+)\.sbck", p.name)
        if m:
            found.append((int(m.group(1)), p))
    if not found:
        raise StoBatchError(f"no model_<step>.sbck checkpoint in {out}")
    return max(found)[1]


def _load_model(cfg, out):
    path = cfg["eval"]["checkpoint"] or _latest_checkpoint(out)
    params, noise = load_checkpoint(path)
    if noise is None:
        raise StoBatchError(f"{path}: checkpoint carries no training noise; cannot run verified inference")
    return params, noise, path


def _report_for(cfg, privacy, params):
    cap = cfg["training"]["theta1_norm_cap"]
    if cap is not None:
        return accountant(privacy, norm_cap=cap)
    return accountant(privacy, theta1=params.theta1)


# -- commands ----------------------------------------------------------------

def cmd_train(cfg, out, distributed):
    train, _ = load_data(cfg)
    d = train[0].shape[1]
    privacy = privacy_config(cfg, d)
    tcfg = training_config(cfg, privacy)
    every = cfg["training"]["checkpoint_every"]
    if every:
        tcfg = replace(tcfg, checkpoint_every=every, checkpoint_dir=str(out))
    guard = NoiseGuard()
    noise = guard.draw(privacy.delta_R, privacy.eps1, privacy.delta_L2, privacy.eps2, d, privacy.beta,
                       privacy.h_pi_size, seed=derive_seed(cfg.seed, "training-noise", cfg["privacy"]["noise_seed"]))
    trainer = train_stobatch if distributed else train_sequential
    params, report, run_log = trainer(tcfg, train, noise, guard=guard)
    save_checkpoint(out / f"model_{tcfg.steps}.sbck", params, noise)
    header = report_header(cfg, report)
    run_log.to_csv(out / "run_log.csv", header)
    text = report.to_text()
    if run_log.measured_report is not None and report.gamma_source != "measured":
        text += "".join(f"measured_{line}\n" for line in run_log.measured_report.to_text().splitlines())
    (out / "privacy_report.txt").write_text(f"# config_hash = {cfg.digest()}\n" + text)
    print(text, end="")
    return 0


def cmd_certify(cfg, out):
    _, (Xt, yt) = load_data(cfg)
    params, noise, _ = _load_model(cfg, out)
    privacy = privacy_config(cfg, Xt.shape[1])
    rc = robustness_config(cfg)
    limit = cfg["certify"]["limit"] or len(Xt)
    Xt, yt = Xt[:limit], yt[:limit]
    scorer = DPScorer.from_privacy(params, noise, privacy)
    results = certify_batch(scorer, Xt, rc)
    mu_a = cfg["certify"]["mu_a"]
    report = _report_for(cfg, privacy, params)
    header = report_header(cfg, report)
    write_cert_report(out / "cert_report.csv", results, mu_a, header)
    acc = conventional_accuracy([r.label for r in results], yt)
    cert = certified_accuracy(results, yt, mu_a)
    print(f"conventional_acc = {acc!r}\ncertified_acc = {cert!r}  (mu_a = {mu_a})")
    return 0


def smoothed_predictions(scorer, X, n, stream):
    return np.array([argmax_lowest(monte_carlo_expectation(scorer, x, n, stream)) for x in X])


def cmd_attack_eval(cfg, out):
    _, (Xt, yt) = load_data(cfg)
    params, noise, _ = _load_model(cfg, out)
    privacy = privacy_config(cfg, Xt.shape[1])
    ec = cfg["eval"]
    limit = ec["limit"] or len(Xt)
    Xt, yt = Xt[:limit], yt[:limit]
    scorer = DPScorer.from_privacy(params, noise, privacy)
    rc = robustness_config(cfg)
    m = privacy.m
    # attacks see the noise-centred network; predictions use the smoothed scorer
    net = Network(params, noise.chi1 / m, 2.0 * noise.chi2 / m)
    report = EvalReport(privacy=_report_for(cfg, privacy, params))
    stream = InferenceNoiseStream(noise, rc.psi, stream_id=("eval", cfg.seed))
    clean_pred = smoothed_predictions(scorer, Xt, ec["n_predict"], stream.fork("clean"))
    results = certify_batch(scorer, Xt, rc)
    acc0 = conventional_accuracy(clean_pred, yt)
    for mu_a in ec["mu_a"]:
        report.add("none", mu_a, acc0, certified_accuracy(results, yt, mu_a), len(yt))
    for kind in ec["attacks"]:
        acfg = AttackConfig(mu=max(ec["mu_a"]), steps=ec["attack_steps"], kinds=(kind,))
        for mu_a in ec["mu_a"]:
            x_adv = run_attack(kind, net, Xt, mu_a, acfg, seed=derive_seed(cfg.seed, "eval-attack", kind, mu_a))
            pred = smoothed_predictions(scorer, x_adv, ec["n_predict"], stream.fork((kind, mu_a)))
            report.add(kind, mu_a, conventional_accuracy(pred, yt), None, len(yt))
    report.to_csv(out / "eval_report.csv", report_header(cfg, report.privacy))
    for r in report.rows:
        print(f"{r['attack']:>6} mu_a={r['mu_a']:<5} conventional={r['conventional_acc']:.4f} certified={r['certified_acc']}")
    return 0


def cmd_account(cfg, out):
    tc = cfg["training"]
    ckpt = cfg["eval"]["checkpoint"]
    params = None
    if ckpt:
        params, _ = load_checkpoint(ckpt)
        d = params.d
    else:
        d = cfg["data"]["d"]
    privacy = privacy_config(cfg, d)
    if tc["theta1_norm_cap"] is not None:
        report = accountant(privacy, norm_cap=tc["theta1_norm_cap"])
    elif params is not None:
        report = accountant(privacy, theta1=params.theta1)
    else:
        raise ConfigParseError("account needs [training] theta1_norm_cap or [eval] checkpoint to evaluate gamma")
    text = report.to_text()
    (out / "privacy_report.txt").write_text(f"# config_hash = {cfg.digest()}\n" + text)
    print(text, end="")
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="stobatch", description="DP adversarial training and verified inference")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="path to the run configuration")
    ap.add_argument("--seed", type=int, default=None, help="override the top-level seed (u64)")
    ap.add_argument("--out", default=".", help="output directory")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config, args.seed)
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2
    except ConfigParseError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if args.command in ("train", "train-dist"):
            return cmd_train(cfg, out, args.command == "train-dist")
        if args.command == "certify":
            return cmd_certify(cfg, out)
        if args.command == "attack-eval":
            return cmd_attack_eval(cfg, out)
        return cmd_account(cfg, out)
    except ConfigParseError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (StoBatchError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
