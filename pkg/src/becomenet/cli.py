"""``becomenet`` command line: synthetic data, training, CV, evaluation,
graph export, animation clips, validity reports and gradient checks.

Every command writes its fully resolved configuration to ``<out>/config.json``.
Settings resolve as built-in defaults, then ``--config`` JSON, then flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import animation, validity
from .datapipe import Dataset, generate_synthetic, load_manifest, save_manifest, split_half
from .datapipe.synthetic import UNILATERAL_AU_NAMES, UNILATERAL_LABEL_MAP
from .network import NetworkConfig, build, forward_features, load_checkpoint, save_checkpoint
from .seeding import derive_rng
from .trainer import TrainConfig, crossval, evaluate, fit

log = logging.getLogger("becomenet")

DEFAULTS = {
    "seed": 0,
    "variant": "F",
    "train": {},
    "network": {},
    "synth": {"subjects": 12, "samples": 40, "c": 8, "k": 4, "image_size": 64},
    "crossval": {"folds": 3, "workers": 1},
    "graph": {"alpha": 0.05, "batch_size": 32, "task": "au"},
    "validity": {"aoi": [0.0, 0.0, 1.0, 1.0], "face_fraction": 0.15, "alpha": 0.05},
    "gradcheck": {"image_size": 16, "l": 8, "c": 3, "k": 3, "batch_size": 8, "epsilon": 1e-4,
                  "tolerance": 1e-3, "max_probes": 6},
}


class CliError(Exception):
    pass


# ---------------------------------------------------------------- config plumbing


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))
    if args.config:
        try:
            cfg = _merge(cfg, json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from None
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.variant is not None:
        cfg["variant"] = args.variant
    train = cfg["train"]
    if args.no_multitask:
        train["enable_multitask"] = False
    if args.no_bgc:
        train["enable_bgc"] = False
    if args.alpha is not None:
        train["alpha"] = args.alpha
        cfg["graph"]["alpha"] = args.alpha
        cfg["validity"]["alpha"] = args.alpha
    if args.threshold is not None:
        train["threshold"] = args.threshold
    train["seed"] = cfg["seed"]
    try:
        cfg["train"] = TrainConfig.from_dict(train).to_dict()
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid train settings: {exc}") from None
    if cfg["variant"] not in ("F", "H"):
        raise CliError(f"variant must be F or H, got {cfg['variant']!r}")
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(out: Path, command: str, cfg: dict, extra: dict | None = None) -> None:
    doc = {"command": command, **cfg, **(extra or {})}
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


_LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"


def _attach_log(out: Path) -> None:
    # no timestamps, so reruns with the same seed leave identical logs
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter(_LOG_FORMAT))
    log.addHandler(handler)


def _network_config(cfg: dict, ds: Dataset) -> NetworkConfig:
    _, h, w = ds.images.shape
    l = ds.landmarks.shape[1]  # noqa: E741
    variant = cfg["variant"]
    if variant == "F" and (h != w or l != 68):
        raise CliError(f"variant F needs square images and 68 landmarks, data has {h}x{w} and {l}")
    if variant == "H" and (h != 2 * w or l != 39):
        raise CliError(f"variant H needs 2:1 tall images and 39 landmarks, data has {h}x{w} and {l}")
    return NetworkConfig(image_h=h, image_w=w, l=l, c=ds.c, k=max(ds.k, 1), **cfg["network"])


def _load(path) -> Dataset:
    try:
        return load_manifest(path)
    except (OSError, ValueError) as exc:
        raise CliError(str(exc)) from None


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg) -> None:
    s = cfg["synth"]
    for key in ("subjects", "samples", "c", "k", "image_size"):
        val = getattr(args, key, None)
        if val is not None:
            s[key] = val
    ds = generate_synthetic(cfg["seed"], n_subjects=s["subjects"], samples_per_subject=s["samples"],
                            c=s["c"], k=s["k"], image_size=s["image_size"])
    if cfg["variant"] == "H":
        if ds.c != 8:
            raise CliError("half-face synthesis maps the 8 built-in AUs to per-side labels; use c=8")
        halves = []
        for sample in ds:
            halves.extend(split_half(sample, UNILATERAL_LABEL_MAP))
        ds = Dataset.from_samples(halves, au_names=UNILATERAL_AU_NAMES, k=ds.k)
    out = _out_dir(args)
    save_manifest(ds, out / "manifest.csv")
    _write_config(out, "synth", cfg)
    print(f"wrote {len(ds)} samples to {out / 'manifest.csv'}")


def _expr_dataset(args, au_ds: Dataset) -> Dataset:
    return _load(args.manifest_expr) if args.manifest_expr else au_ds


def cmd_train(args, cfg) -> None:
    au_ds = _load(args.manifest_au)
    ex_ds = _expr_dataset(args, au_ds)
    net = _network_config(cfg, au_ds)
    tcfg = TrainConfig.from_dict(cfg["train"])
    out = _out_dir(args)
    _attach_log(out)
    _write_config(out, "train", cfg, {"network_resolved": net.to_dict()})
    params = build(net, derive_rng(tcfg.seed, "init"))
    res = fit(params, au_ds, ex_ds, tcfg)
    save_checkpoint(res.params, out / "checkpoint.bcm",
                    extra={"au_names": au_ds.au_names, "train": tcfg.to_dict(), "best_epoch": res.best_epoch})
    (out / "history.json").write_text(res.history_json())
    print(f"best epoch {res.best_epoch}, validation mean F1 {res.best_val_f1}")


def cmd_crossval(args, cfg) -> None:
    au_ds = _load(args.manifest_au)
    ex_ds = _expr_dataset(args, au_ds)
    net = _network_config(cfg, au_ds)
    tcfg = TrainConfig.from_dict(cfg["train"])
    cv = cfg["crossval"]
    if args.folds is not None:
        cv["folds"] = args.folds
    if args.workers is not None:
        cv["workers"] = args.workers
    out = _out_dir(args)
    _attach_log(out)
    _write_config(out, "crossval", cfg, {"network_resolved": net.to_dict()})
    try:
        res = crossval(au_ds, ex_ds if tcfg.enable_multitask else None, net, tcfg, k=cv["folds"],
                       workers=cv["workers"])
    except ValueError as exc:
        raise CliError(str(exc)) from None
    (out / "metrics.json").write_text(res.pooled.to_json())
    (out / "metrics.csv").write_text(res.pooled.to_csv())
    (out / "predictions.csv").write_text(res.predictions_csv())
    summary = {"split": res.split.to_dict(), "identity_corr": res.identity_corr, "history": res.histories}
    (out / "history.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"pooled mean F1 {res.pooled.mean_f1:.4f}")


def cmd_eval(args, cfg) -> None:
    ds = _load(args.manifest)
    try:
        params = load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as exc:
        raise CliError(str(exc)) from None
    pc = params.config
    if (pc.image_h, pc.image_w, pc.l, pc.c) != (ds.images.shape[1], ds.images.shape[2], ds.landmarks.shape[1], ds.c):
        raise CliError("checkpoint and manifest disagree on image size, landmark count or AU count")
    threshold = cfg["train"]["threshold"]
    report = evaluate(params, ds, threshold)
    out = _out_dir(args)
    _write_config(out, "eval", cfg, {"checkpoint": str(args.checkpoint), "manifest": str(args.manifest)})
    (out / "metrics.json").write_text(report.to_json())
    (out / "metrics.csv").write_text(report.to_csv())
    print(f"mean F1 {report.mean_f1:.4f}")


def cmd_graph(args, cfg) -> None:
    from .betagraph import IDENTITY, LABEL, NodeMatrix, identity_table, screen_edges

    g = cfg["graph"]
    if args.batch_size is not None:
        g["batch_size"] = args.batch_size
    if args.task is not None:
        g["task"] = args.task
    ds = _load(args.manifest)
    try:
        params = load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as exc:
        raise CliError(str(exc)) from None
    ds = ds.with_au() if g["task"] == "au" else ds.with_expr()
    b = min(g["batch_size"], len(ds))
    if b < 3:
        raise CliError("graph screening needs a batch of at least 3 labeled samples")
    idx = np.sort(derive_rng(cfg["seed"], "graph/batch").permutation(len(ds))[:b])
    z = forward_features(params, ds.images[idx], ds.landmarks[idx]).data
    if g["task"] == "au":
        labels, lab_names = ds.au_labels[idx].astype(float), list(ds.au_names)
    else:
        labels, lab_names = ds.expr_onehot()[idx], [f"expr_{j}" for j in range(ds.k)]
    ident = identity_table(ds.subjects, derive_rng(cfg["seed"], "identity"))
    nodes = NodeMatrix(z, labels, np.array([ident[s] for s in ds.subject_ids[idx]]))
    names = [f"z{j}" for j in range(nodes.p)] + lab_names + ["identity"]
    graph = screen_edges(nodes, g["alpha"], names=names)
    out = _out_dir(args)
    _write_config(out, "graph", cfg, {"checkpoint": str(args.checkpoint), "manifest": str(args.manifest)})
    graph.save(out / "graph.json", out / "graph.dot")
    roles = graph.roles
    n_lab = sum(1 for i, j in graph.edges if LABEL in (roles[i], roles[j]))
    n_id = sum(1 for i, j in graph.edges if IDENTITY in (roles[i], roles[j]))
    print(f"{len(graph.edges)} edges ({n_lab} touching labels, {n_id} touching identity), Q_eta={graph.q_eta:.6f}")


def cmd_animate(args, cfg) -> None:
    names = [e.name for e in animation.builtin_expressions()] if args.expression == "all" else [args.expression]
    mapping = None
    if args.channel_map:
        try:
            mapping = json.loads(Path(args.channel_map).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read channel map: {exc}") from None
    out = _out_dir(args)
    _write_config(out, "animate", cfg, {"expression": args.expression, "channel_map": args.channel_map})
    for name in names:
        try:
            clip = animation.make_clip(animation.expression(name))
        except KeyError as exc:
            raise CliError(str(exc.args[0])) from None
        if mapping:
            clip = animation.apply_channel_map(clip, mapping)
        animation.export_clip(clip, out / f"{name}.json")
    print(f"wrote {len(names)} clip(s) to {out}")


def cmd_validity(args, cfg) -> None:
    v = cfg["validity"]
    if args.aoi is not None:
        v["aoi"] = args.aoi
    if args.face_fraction is not None:
        v["face_fraction"] = args.face_fraction
    if not (args.gaze or args.detections):
        raise CliError("give --gaze and/or --detections")
    results, excluded = [], []
    try:
        if args.gaze:
            aoi = validity.AoiRect(*v["aoi"])
            per_construct: dict[str, list[float]] = {}
            for (construct, participant), samples in validity.read_gaze_csv(args.gaze).items():
                try:
                    per_construct.setdefault(construct, []).append(validity.pct_face(samples, aoi))
                except validity.TrackingLossError:
                    excluded.append({"construct": construct, "participant_id": participant})
            for construct, vals in per_construct.items():
                results.append(validity.recognition_validity(vals, v["face_fraction"], v["alpha"], construct))
        if args.detections:
            for construct, det in validity.read_detections_csv(args.detections).items():
                results.append(validity.mimicry_validity(det, v["alpha"], construct))
    except (OSError, ValueError) as exc:
        raise CliError(str(exc)) from None
    out = _out_dir(args)
    _write_config(out, "validity", cfg, {"gaze": args.gaze, "detections": args.detections})
    csv_text, md_text = validity.build_report(results)
    (out / "report.csv").write_text(csv_text)
    (out / "report.md").write_text(md_text)
    (out / "results.json").write_text(json.dumps({"results": [r.to_dict() for r in results],
                                                  "excluded_tracking_loss": excluded}, indent=2) + "\n")
    print(md_text, end="")


def gradcheck_composite(settings: dict, seed: int) -> float:
    """Worst relative gradient error of the full composite loss at reduced scale."""
    from . import diffcomp as dc
    from .betagraph import bgc_from_batch
    from .losses import LabelWeights, total_loss, wcce, wmce
    from .network import forward_au, forward_expr

    s = settings
    rng = derive_rng(seed, "gradcheck/data")
    net = NetworkConfig(image_h=s["image_size"], image_w=s["image_size"], l=s["l"], c=s["c"], k=s["k"],
                        dropout_p=0.5, fc_units=s.get("fc_units", 8), conv_channels=(2, 2, 2), lmk_channels=2)
    params = build(net, derive_rng(seed, "gradcheck/init"))
    b = s["batch_size"]
    imgs = rng.random((b, net.image_h, net.image_w))
    lmk = rng.random((b, net.l, 2))
    au = (rng.random((b, net.c)) < 0.5).astype(float)
    au[0], au[1] = 1.0, 0.0
    ex = np.eye(net.k)[np.arange(b) % net.k]
    ident = rng.random(b) + 0.1
    weights = LabelWeights(1.0 + rng.random(net.c), 1.0 + rng.random(net.k))
    m = s.get("m", 100.0)

    def loss():
        z = forward_features(params, imgs, lmk)
        return total_loss(wmce(forward_au(params, z), au, weights), wcce(forward_expr(params, z), ex, weights),
                          bgc_from_batch(z, au, ident, 0.05, m), bgc_from_batch(z, ex, ident, 0.05, m))

    return dc.grad_check(loss, params.values(), s["epsilon"], max_probes=s["max_probes"],
                         rng=derive_rng(seed, "gradcheck/probes"))


def cmd_gradcheck(args, cfg) -> None:
    s = cfg["gradcheck"]
    if args.tolerance is not None:
        s["tolerance"] = args.tolerance
    err = float(gradcheck_composite(s, cfg["seed"]))
    ok = bool(err < s["tolerance"])
    if args.out:
        out = _out_dir(args)
        _write_config(out, "gradcheck", cfg)
        (out / "gradcheck.json").write_text(json.dumps({"max_rel_error": err, "tolerance": s["tolerance"],
                                                        "passed": ok}, indent=2) + "\n")
    print(f"max relative error {err:.3e} (tolerance {s['tolerance']:.0e}): {'PASS' if ok else 'FAIL'}")
    if not ok:
        raise CliError("gradient check exceeded tolerance")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with settings (flags override it)")
    common.add_argument("--seed", type=int, help="global seed for every random stream")
    common.add_argument("--out", help="output directory (default: ./out)")
    common.add_argument("--variant", choices=["F", "H"], help="full-face or half-face network")
    common.add_argument("--no-multitask", action="store_true", help="train the AU task alone")
    common.add_argument("--no-bgc", action="store_true", help="drop the correlation loss terms")
    common.add_argument("--alpha", type=float, help="family-wise level for edge screening")
    common.add_argument("--threshold", type=float, help="AU decision threshold on sigmoid outputs")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to the console")

    parser = argparse.ArgumentParser(prog="becomenet", description=__doc__.split("\n\n")[0].replace("``", ""))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset and manifest")
    p.add_argument("--subjects", type=int)
    p.add_argument("--samples", type=int, help="samples per subject")
    p.add_argument("--c", type=int, help="number of synthetic AUs (<= 8)")
    p.add_argument("--k", type=int, help="number of expression classes")
    p.add_argument("--image-size", type=int, dest="image_size")
    p.set_defaults(func=cmd_synth)

    for name, func, helptext in (("train", cmd_train, "fit one model"),
                                 ("crossval", cmd_crossval, "subject-independent k-fold CV")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--manifest-au", required=True, dest="manifest_au")
        p.add_argument("--manifest-expr", dest="manifest_expr", help="defaults to the AU manifest")
        if name == "crossval":
            p.add_argument("--folds", type=int)
            p.add_argument("--workers", type=int, help="folds trained concurrently")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", parents=[common], help="per-AU precision/recall/F1 of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("graph", parents=[common], help="screen correlation edges over learned features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--task", choices=["au", "expr"])
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("animate", parents=[common], help="export expression clips as JSON")
    p.add_argument("expression", help="expression name or 'all'")
    p.add_argument("--channel-map", dest="channel_map", help="JSON object renaming AU channels")
    p.set_defaults(func=cmd_animate)

    p = sub.add_parser("validity", parents=[common], help="construct-validity t-test report")
    p.add_argument("--gaze", help="CSV: timestamp_ms,x,y,on_screen[,participant_id,construct]")
    p.add_argument("--detections", help="CSV: participant_id,construct,detected")
    p.add_argument("--aoi", type=float, nargs=4, metavar=("LEFT", "TOP", "WIDTH", "HEIGHT"))
    p.add_argument("--face-fraction", type=float, dest="face_fraction")
    p.set_defaults(func=cmd_validity)

    p = sub.add_parser("gradcheck", parents=[common], help="composite-loss gradient check at reduced scale")
    p.add_argument("--tolerance", type=float)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    console = logging.StreamHandler()
    console.setLevel(logging.INFO if args.verbose else logging.WARNING)
    console.setFormatter(logging.Formatter(_LOG_FORMAT))
    saved = (log.level, log.propagate)
    log.setLevel(logging.INFO)
    log.propagate = False
    log.addHandler(console)
    try:
        cfg = resolve_config(args)
        args.func(args, cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        for handler in list(log.handlers):
            log.removeHandler(handler)
            handler.close()
        log.setLevel(saved[0])
        log.propagate = saved[1]
    return 0


if __name__ == "__main__":
    sys.exit(main())
