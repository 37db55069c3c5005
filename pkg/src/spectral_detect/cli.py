"""Command line front end.

Every command writes its outputs plus a JSON manifest of the resolved flags,
seeds, dataset checksums, tool version and duration. Exit codes: 0 success,
2 usage error, 3 data error, 4 numerical failure.
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import ATTACK_KINDS, AttackConfig, run_attack
from .datasets import (
    DatasetFormatError,
    dataset_dir,
    load_cifar10,
    load_cifar10_binary,
    load_mnist,
    load_mnist_idx,
    write_cifar10_binary,
    write_idx,
)
from .detector import (
    CalibrationError,
    ProfileFormatError,
    calibrate,
    evaluate,
    load_profile,
    rho,
    save_profile,
    score,
)
from .experiment import (
    DEFAULT_MODELS,
    default_model,
    detection_grid,
    restoration_rate,
    text_histogram,
    write_rows,
)
from .compression import truncate_images
from .image import ImageMatrix, random_rotation
from .models import CheckpointError, TinyClassifier, TrainingDivergenceError, load_model, save_model
from .perturbation import perturbation_report, spectral_change
from .svd import SpectrumError, SvdConvergenceError, singular_values

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers


class Run:
    """Collects manifest fields while a command executes."""

    def __init__(self, args):
        self.args = args
        self.t0 = time.perf_counter()
        self.checksums = {}
        self.extra = {}
        self.outputs = []

    def dataset(self, split="test", start=None, count=None, force=False):
        """Selected slice; ``split`` is the default unless ``force`` is set."""
        a = self.args
        root = dataset_dir(a.data_dir)
        if not root.is_dir():
            raise UsageError(f"dataset directory {root} does not exist (set --data-dir or DATASET_DIR)")
        split = split if force or not a.split else a.split
        ds = (load_mnist if a.dataset == "mnist" else load_cifar10)(split, root)
        self.checksums[ds.name] = ds.checksum
        start = a.start if start is None else start
        count = a.count if count is None else count
        stop = None if count is None else start + count
        sub = ds.subset(start, stop)
        if len(sub) == 0:
            raise UsageError(f"selection start={start} count={count} is empty")
        return sub

    def output(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(str(path))
        return path

    def manifest(self, path):
        flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(self.args).items()
                 if k != "func"}
        doc = {
            "command": self.args.command,
            "flags": flags,
            "seeds": {"seed": self.args.seed},
            "profile": self.args.profile,
            "dataset_checksums": self.checksums,
            "tool_version": __version__,
            "outputs": self.outputs,
            "duration_seconds": time.perf_counter() - self.t0,
            **self.extra,
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _out_dir(args):
    if not args.out:
        raise UsageError(f"{args.command} needs --out DIR")
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _need_profile(args):
    if not args.profile:
        raise UsageError(f"{args.command} needs --profile")
    return load_profile(args.profile)


def _model(run, train_split="train"):
    a = run.args
    if a.model:
        model = load_model(a.model)
        run.extra["model"] = {"checkpoint": a.model, "metadata": model.metadata_}
        return model
    ds = run.dataset(split=train_split, start=0, count=None, force=True)
    model = default_model(a.dataset, ds.images, ds.labels, seed=a.seed)
    run.extra["model"] = {"trained": DEFAULT_MODELS[a.dataset], "metadata": model.metadata_}
    return model


def _quantize_within(x_adv, x0, eps):
    # nearest byte value that keeps |x - x0| <= eps; x0 lies on the byte grid
    g = np.rint(x0 * 255)
    r = np.floor(eps * 255 + 1e-9)
    return np.clip(np.rint(x_adv * 255), np.maximum(g - r, 0), np.minimum(g + r, 255)) / 255


def load_attacked(path):
    """Images written by the ``attack`` command, as a :class:`LabeledDataset`."""
    d = Path(path)
    if (d / "images.idx").exists():
        ds = load_mnist_idx(d / "images.idx", d / "labels.idx", name=f"attacked:{d}")
    elif (d / "images.bin").exists():
        ds = load_cifar10_binary([d / "images.bin"], name=f"attacked:{d}")
    else:
        raise DatasetFormatError(f"{d} holds no attack output (images.idx or images.bin)")
    if len(ds) == 0:
        raise DatasetFormatError(f"{d} holds an empty adversarial set")
    return ds


def _attack_meta(path):
    try:
        return json.loads((Path(path) / "manifest.json").read_text())["attack"]
    except (OSError, KeyError, json.JSONDecodeError):
        return {"kind": "unknown", "epsilon": float("nan")}


def _fmt(x):
    return "%.17g" % x


# ---------------------------------------------------------------- commands


def cmd_calibrate(run):
    a = run.args
    if not a.profile:
        raise UsageError("calibrate needs --profile PATH to write")
    ds = run.dataset(split="train")
    lo, hi = a.percentiles
    profile = calibrate(ds.images, alpha=a.alpha, percentile_lo=lo, percentile_hi=hi,
                        coverage=a.coverage, dataset_label=ds.name)
    save_profile(profile, run.output(a.profile))
    print(f"m = {profile.m}\nL = {_fmt(profile.L)}\nU = {_fmt(profile.U)}")
    run.manifest(str(a.profile) + ".manifest.json")


def cmd_train_model(run):
    a = run.args
    if not a.model:
        raise UsageError("train-model needs --model PATH to write")
    ds = run.dataset(split="train")
    params = dict(DEFAULT_MODELS[a.dataset])
    for key, flag in (("arch", a.arch), ("hidden", a.hidden), ("epochs", a.epochs),
                      ("learning_rate", a.lr), ("batch_size", a.batch_size)):
        if flag is not None:
            params[key] = flag
    model = TinyClassifier(seed=a.seed, **params).fit(ds.images, ds.labels)
    save_model(model, run.output(a.model))
    meta = model.metadata_
    print(f"train accuracy = {meta['train_accuracy']:.4f}")
    if meta["validation_accuracy"] is not None:
        print(f"validation accuracy = {meta['validation_accuracy']:.4f}")
    run.extra["model"] = {"params": model.get_params(), "metadata": meta}
    run.manifest(str(a.model) + ".manifest.json")


def _attack_config(a, eps=None, kind=None):
    return AttackConfig(kind or a.kind[0], a.eps[0] if eps is None else eps, steps=a.steps,
                        step_size=a.step_size, mu=a.mu, seed=a.seed)


def cmd_attack(run):
    a = run.args
    out = _out_dir(a)
    cfg = _attack_config(a)
    ds = run.dataset(split="test")
    model = _model(run)
    A = run_attack(model, ds.images, ds.labels, cfg)
    if a.dataset == "mnist":
        write_idx(run.output(out / "images.idx"), A[..., 0], dtype="double")
        write_idx(run.output(out / "labels.idx"), ds.labels)
    else:
        A = _quantize_within(A, ds.images, cfg.epsilon)
        write_cifar10_binary(run.output(out / "images.bin"), A, ds.labels)
    clean_pred, adv_pred = model.predict(ds.images), model.predict(A)
    change = np.abs(A - ds.images).reshape(len(A), -1).max(axis=1)
    with open(run.output(out / "attack.csv"), "w") as fh:
        write_rows(fh, [dict(image_id=a.start + i, label=int(ds.labels[i]), clean_pred=int(clean_pred[i]),
                             adv_pred=int(adv_pred[i]), success=int(adv_pred[i] != clean_pred[i]),
                             max_abs_change=float(change[i])) for i in range(len(A))])
    print(f"attack success = {np.mean(adv_pred != clean_pred):.4f}  max |change| = {change.max():.6g}")
    run.extra["attack"] = cfg.resolved()
    run.manifest(out / "manifest.json")


def cmd_evaluate(run):
    a = run.args
    out = _out_dir(a)
    profile = _need_profile(a)
    clean = run.dataset(split="test")
    rows = []
    if a.adversarial:
        fpr = None
        for path in a.adversarial:
            adv = load_attacked(path)
            run.checksums[adv.name] = adv.checksum
            rep = evaluate(clean.images, adv.images, profile)
            meta = _attack_meta(path)
            fpr = rep.false_positive_rate
            rows.append(dict(kind=meta["kind"], eps=float(meta["epsilon"]), n=rep.n_adversarial,
                             detection_rate=rep.detection_rate, fpr=fpr, attack_success=float("nan")))
            with open(run.output(out / f"report_{meta['kind']}_{meta['epsilon']}.csv"), "w") as fh:
                rep.to_csv(fh)
        rows.insert(0, dict(kind="none", eps=0.0, n=clean.images.shape[0], detection_rate=fpr,
                            fpr=fpr, attack_success=0.0))
    else:
        model = _model(run)
        rows = detection_grid(profile, model, clean.images, clean.labels, a.kind, a.eps,
                              steps=a.steps, step_size=a.step_size, mu=a.mu, seed=a.seed)
        run.extra["attacks"] = [_attack_config(a, e, k).resolved() for k in a.kind for e in a.eps]
    with open(run.output(out / "summary.csv"), "w") as fh:
        write_rows(fh, rows)
    for r in rows:
        print(f"{r['kind']:>11} eps={r['eps']:<7g} detection={r['detection_rate']:.3f}")
    run.manifest(out / "manifest.json")


def cmd_classify(run):
    a = run.args
    out = _out_dir(a)
    profile = _need_profile(a)
    if a.adversarial:
        ds = load_attacked(a.adversarial[0])
        run.checksums[ds.name] = ds.checksum
        first = 0
    else:
        ds = run.dataset(split="test")
        first = a.start
    r = score(ds.images, profile)
    clean = profile.contains(r)
    with open(run.output(out / "verdicts.csv"), "w") as fh:
        write_rows(fh, [dict(image_id=first + i, rho=float(r[i]),
                             verdict="clean" if clean[i] else "adversarial") for i in range(len(r))])
    print(f"flagged {int(np.sum(~clean))} of {len(r)} as adversarial")
    run.manifest(out / "manifest.json")


def cmd_diagnose(run):
    a = run.args
    out = _out_dir(a)
    profile = _need_profile(a)
    clean = run.dataset(split="test")
    if a.adversarial:
        adv = load_attacked(a.adversarial[0])
        run.checksums[adv.name] = adv.checksum
        A = adv.images
    elif a.kind[0] == "random_sign":
        cfg = _attack_config(a)
        A = run_attack(None, clean.images, None, cfg)
        run.extra["attack"] = cfg.resolved()
    else:
        cfg = _attack_config(a)
        A = run_attack(_model(run), clean.images, clean.labels, cfg)
        run.extra["attack"] = cfg.resolved()
    if A.shape != clean.images.shape:
        raise DatasetFormatError(f"adversarial set shape {A.shape} != clean selection {clean.images.shape}")
    if not 0 <= a.index < len(A):
        raise UsageError(f"--index {a.index} outside the {len(A)} selected images")

    to_m = lambda x: ImageMatrix(np.moveaxis(x, -1, 0))
    rep = perturbation_report(to_m(clean.images[a.index]), to_m(A[a.index]))
    with open(run.output(out / "perturbation.csv"), "w") as fh:
        rep.to_csv(fh)
    c = spectral_change(clean.images, A)
    with open(run.output(out / "bounds.csv"), "w") as fh:
        write_rows(fh, [dict(image_id=a.start + i, e_norm2=float(c["e_norm2"][i]),
                             e_normF=float(c["e_normF"][i]),
                             weyl_violations=int(c["weyl_violations"][i]),
                             mirsky_violation=int(c["mirsky_violation"][i]),
                             wedin_violations=int(c["wedin_violations"][i])) for i in range(len(A))])
    hist = text_histogram({"clean": score(clean.images, profile), "attacked": score(A, profile)})
    (run.output(out / "histogram.txt")).write_text(hist)
    print(hist, end="")
    print(f"violations: weyl {int(c['weyl_violations'].sum())} mirsky {int(c['mirsky_violation'].sum())} "
          f"wedin {int(c['wedin_violations'].sum())} over {len(A)} pairs")
    run.manifest(out / "manifest.json")


def cmd_compress(run):
    a = run.args
    out = _out_dir(a)
    if a.adversarial:
        ds = load_attacked(a.adversarial[0])
        run.checksums[ds.name] = ds.checksum
        first = 0
    else:
        ds = run.dataset(split="test")
        first = a.start
    P = ds.images.shape[3] * min(ds.images.shape[1:3])
    k = P if a.k is None else a.k
    if not 0 <= k <= P:
        raise UsageError(f"--k must lie in [0, {P}]")
    compressed, r = truncate_images(ds.images, k)
    rows = [dict(image_id=first + i, energy_fraction=float(r[i])) for i in range(len(r))]
    if a.model:
        model = _model(run)
        before, after = model.predict(ds.images), model.predict(compressed)
        for row, b, c, y in zip(rows, before, after, ds.labels):
            row.update(label=int(y), pred_before=int(b), pred_after=int(c))
        print(f"label agreement before/after = {np.mean(before == after):.4f}")
        if a.adversarial:
            # the clean counterpart is the slice the attack was run on
            try:
                flags = json.loads((Path(a.adversarial[0]) / "manifest.json").read_text())["flags"]
                src_start = flags["start"]
            except (OSError, KeyError, json.JSONDecodeError):
                raise DatasetFormatError("attack manifest missing; cannot locate clean images") from None
            clean = run.dataset(split="test", start=src_start, count=len(ds), force=True)
            rate = restoration_rate(model, clean.images, ds.images, k)
            run.extra["restoration_rate"] = rate
            print(f"label restoration rate = {rate:.4f}")
    with open(run.output(out / "compress.csv"), "w") as fh:
        write_rows(fh, rows)
    print(f"k = {k}  mean energy fraction = {np.nanmean(r):.6f}")
    run.manifest(out / "manifest.json")


def cmd_rotate(run):
    a = run.args
    out = _out_dir(a)
    profile = _need_profile(a)
    ds = run.dataset(split="test")
    X = ds.images
    M, N, _ = X.shape[1:]
    rotated = np.empty_like(X)
    for i in range(len(X)):
        rp = random_rotation(M, N, seed=[a.seed, a.start + i])
        rotated[i] = np.moveaxis(rp.left @ np.moveaxis(X[i], -1, 0) @ rp.right.T, 0, -1)
    # rotated pixels leave [0, 1]; the statistic only needs singular values
    r0 = score(X, profile)
    r1 = rho(singular_values(rotated), profile.m)
    v0, v1 = profile.contains(r0), profile.contains(r1)
    rows = [dict(image_id=a.start + i, rho_before=float(r0[i]), rho_after=float(r1[i]),
                 verdict_before="clean" if v0[i] else "adversarial",
                 verdict_after="clean" if v1[i] else "adversarial") for i in range(len(X))]
    with open(run.output(out / "rotate.csv"), "w") as fh:
        write_rows(fh, rows)
    print(f"max |rho change| = {np.max(np.abs(r1 - r0)):.3g}  verdicts changed = {int(np.sum(v0 != v1))}")
    run.manifest(out / "manifest.json")


# ---------------------------------------------------------------- parser


def _common_flags():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--dataset", choices=["mnist", "cifar10"], default="mnist")
    common.add_argument("--data-dir", help="dataset root (default $DATASET_DIR or /root/data)")
    common.add_argument("--profile", help="calibration profile path")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output directory")
    common.add_argument("--split", choices=["train", "test"], default=None,
                        help="dataset split (command-specific default)")
    common.add_argument("--start", type=int, default=0, help="first image of the selection")
    common.add_argument("--count", type=int, default=None, help="number of images (default all)")
    return common


def _attack_flags():
    attack = argparse.ArgumentParser(add_help=False)
    attack.add_argument("--kind", nargs="+", choices=ATTACK_KINDS, default=["fgsm"])
    attack.add_argument("--eps", nargs="+", type=float, default=[0.1])
    attack.add_argument("--steps", type=int, default=10)
    attack.add_argument("--step-size", type=float, default=None, help="PGD step (default eps/4)")
    attack.add_argument("--mu", type=float, default=1.0, help="momentum decay")
    attack.add_argument("--model", help="TCLF checkpoint (default: train the stock model)")
    return attack


def build_parser():
    # parents share action objects, so each subcommand gets fresh copies;
    # otherwise set_defaults on one subcommand leaks into the others
    def common():
        return [_common_flags()]

    def with_attack():
        return [_common_flags(), _attack_flags()]

    p = argparse.ArgumentParser(prog="spectral-detect", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", parents=common(), help="fit L and U on clean images")
    c.add_argument("--alpha", type=float, default=0.01)
    c.add_argument("--coverage", type=float, default=0.95)
    c.add_argument("--percentiles", nargs=2, type=float, default=[5.0, 95.0], metavar=("LO", "HI"))
    c.set_defaults(func=cmd_calibrate, count=10000)

    t = sub.add_parser("train-model", parents=common(), help="train the tiny classifier")
    t.add_argument("--model", help="checkpoint path to write")
    t.add_argument("--arch", choices=["linear", "mlp"])
    t.add_argument("--hidden", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.set_defaults(func=cmd_train_model)

    a = sub.add_parser("attack", parents=with_attack(), help="write an attacked copy of a dataset slice")
    a.set_defaults(func=cmd_attack, count=1000)

    e = sub.add_parser("evaluate", parents=with_attack(), help="detection rates per attack and eps")
    e.add_argument("--adversarial", nargs="+", help="attack output directories")
    e.set_defaults(func=cmd_evaluate, count=1000, kind=["fgsm", "pgd", "momentum"],
                   eps=[0.01, 0.03, 0.1, 0.3])

    k = sub.add_parser("classify", parents=common(), help="verdict per image")
    k.add_argument("--adversarial", nargs=1, help="classify an attack output directory instead")
    k.set_defaults(func=cmd_classify)

    d = sub.add_parser("diagnose", parents=with_attack(), help="perturbation report and rho histogram")
    d.add_argument("--adversarial", nargs=1, help="attack output directory matching the selection")
    d.add_argument("--index", type=int, default=0, help="image within the selection for the report")
    d.set_defaults(func=cmd_diagnose, count=1000)

    z = sub.add_parser("compress", parents=common(), help="rank-k truncation and energy fraction")
    z.add_argument("--k", type=int, default=None, help="kept triples (default P)")
    z.add_argument("--model", help="report tiny-model label agreement with this checkpoint")
    z.add_argument("--adversarial", nargs=1, help="compress an attack output directory instead")
    z.set_defaults(func=cmd_compress)

    r = sub.add_parser("rotate", parents=common(), help="check rho under random orthonormal rotations")
    r.set_defaults(func=cmd_rotate, count=100)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(Run(args))
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"spectral-detect {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CalibrationError, SvdConvergenceError, TrainingDivergenceError, SpectrumError) as exc:
        print(f"spectral-detect {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetFormatError, ProfileFormatError, CheckpointError, OSError, ValueError) as exc:
        print(f"spectral-detect {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
