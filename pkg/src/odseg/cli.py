"""``odseg <subcommand> --config <path> [--section.key value]...``

Exit codes:

==  =====================================================
0   success
1   unexpected internal error
2   usage or configuration error
3   missing input file or directory
4   malformed ODSV volume or ODSC checkpoint
5   channel count does not match the network
6   extent mismatch between paired volumes
7   training aborted on a non-finite loss
==  =====================================================
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from odseg import __version__
from odseg import checkpoint as ckpt
from odseg import odsv
from odseg.config import ConfigError, RunConfig, load_config
from odseg.data import LabelMask, PhantomSpec, Volume, generate_phantom, zscore_normalize
from odseg.metrics import evaluate_set
from odseg.network import TrainingError, build, logits_to_mask, sliding_window_predict
from odseg.postprocess import merge_label, postprocess
from odseg.training import LOSS_LOG_COLUMNS, Trainer, format_loss_row

log = logging.getLogger("odseg")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_FORMAT = 4
EXIT_CHANNELS = 5
EXIT_EXTENTS = 6
EXIT_DIVERGED = 7

MANIFEST_COLUMNS = ("case_id", "volume", "mask")


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def build_id() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"odseg-{__version__}-{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"odseg-{__version__}"


def _run_log(outdir, command, cfg: RunConfig):
    Path(outdir).mkdir(parents=True, exist_ok=True)
    text = f"# command: {command}\n# build: {build_id()}\n{cfg.dump()}"
    (Path(outdir) / f"{command}.log").write_text(text)
    log.info("resolved config for %s:\n%s", command, cfg.dump())


@contextlib.contextmanager
def _thread_limit(n):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        yield
        return
    with threadpool_limits(limits=max(1, int(n))):
        yield


def _require(path, what):
    if not Path(path).exists():
        raise CliError(EXIT_MISSING, f"{what} not found: {path}")
    return Path(path)


# ---------------------------------------------------------------- manifest

def write_manifest(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        w.writerows(rows)


def read_manifest(path):
    path = _require(path, "manifest")
    base = path.parent
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows or tuple(rows[0]) != MANIFEST_COLUMNS:
        raise CliError(EXIT_FORMAT, f"manifest {path} must start with {MANIFEST_COLUMNS}")
    return [(cid, base / vol, base / mask) for cid, vol, mask in rows[1:]]


def _load(path, expect):
    _require(path, "volume")
    try:
        return odsv.load_volume(path, expect)
    except odsv.VolumeFormatError as exc:
        raise CliError(EXIT_FORMAT, f"{path}: {exc}") from None


def case_seed(base, index):
    return int(np.random.SeedSequence([int(base), int(index)]).generate_state(1)[0])


# -------------------------------------------------------------- subcommands

def cmd_gen_data(cfg: RunConfig):
    out = Path(cfg.paths.data_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = vars(cfg.phantom).copy()
    splits = (("manifest.tsv", 0, cfg.data.num_cases),
              ("test_manifest.tsv", cfg.data.num_cases, cfg.data.num_test))
    for manifest, start, count in splits:
        if count <= 0:
            continue
        rows = []
        for i in range(start, start + count):
            spec = PhantomSpec(**{**base, "seed": case_seed(cfg.data.seed, i)})
            vol, mask = generate_phantom(spec)
            cid = f"case_{i:04d}"
            odsv.save_volume(vol, out / f"{cid}_vol.odsv")
            odsv.save_volume(mask, out / f"{cid}_seg.odsv")
            rows.append((cid, f"{cid}_vol.odsv", f"{cid}_seg.odsv"))
        write_manifest(out / manifest, rows)
        log.info("wrote %d cases to %s", count, out / manifest)
    _run_log(out, "gen-data", cfg)


def _training_cases(cfg):
    cases = []
    for cid, vpath, mpath in read_manifest(cfg.paths.resolved_manifest()):
        vol = _load(vpath, "volume")
        mask = _load(mpath, "labels")
        if vol.channels != cfg.network.in_channels:
            raise CliError(EXIT_CHANNELS, f"{cid}: {vol.channels} channels, network expects "
                                          f"{cfg.network.in_channels}")
        if vol.extents != mask.extents:
            raise CliError(EXIT_EXTENTS, f"{cid}: volume {vol.extents} vs mask {mask.extents}")
        cases.append((zscore_normalize(vol), mask))
    if not cases:
        raise CliError(EXIT_MISSING, "manifest lists no cases")
    return cases


def cmd_train(cfg: RunConfig):
    run_dir = Path(cfg.paths.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    _run_log(run_dir, "train", cfg)
    cases = _training_cases(cfg)
    settings = cfg.train
    if cfg.paths.resume:
        _require(cfg.paths.resume, "checkpoint")
        try:
            trainer = Trainer.resume(cfg.paths.resume, cases, settings, cfg.augment)
        except ckpt.CheckpointError as exc:
            raise CliError(EXIT_FORMAT, f"{cfg.paths.resume}: {exc}") from None
        mode = "a"
    else:
        net = build(cfg.network, seed=settings.seed)
        trainer = Trainer(net, cases, settings, cfg.augment)
        mode = "w"
    loss_log = run_dir / "loss_log.tsv"
    with open(loss_log, mode) as fh:
        if mode == "w":
            fh.write("\t".join(LOSS_LOG_COLUMNS) + "\n")

        def on_step(row):
            fh.write(format_loss_row(row) + "\n")
            if row[0] % 50 == 0:
                log.info("step %d lr %.3g loss %.4f", row[0], row[1], row[2])
                fh.flush()
            interval = settings.checkpoint_interval
            if interval and row[0] % interval == 0:
                trainer.save(run_dir / f"checkpoint_{row[0]:06d}.odsc")

        try:
            trainer.run(on_step=on_step)
        except TrainingError as exc:
            raise CliError(EXIT_DIVERGED, str(exc)) from None
    trainer.save(cfg.paths.resolved_checkpoint())
    log.info("saved %s", cfg.paths.resolved_checkpoint())


def _load_net(cfg):
    path = _require(cfg.paths.resolved_checkpoint(), "checkpoint")
    try:
        net, _, _ = ckpt.load_checkpoint(path)
    except ckpt.CheckpointError as exc:
        raise CliError(EXIT_FORMAT, f"{path}: {exc}") from None
    return net


def cmd_predict(cfg: RunConfig):
    net = _load_net(cfg)
    out = Path(cfg.paths.predictions_dir)
    out.mkdir(parents=True, exist_ok=True)
    _run_log(out, "predict", cfg)
    for cid, vpath, _ in read_manifest(cfg.paths.resolved_manifest()):
        vol = _load(vpath, "volume")
        if vol.channels != net.config.in_channels:
            raise CliError(EXIT_CHANNELS, f"{cid}: {vol.channels} channels, network expects "
                                          f"{net.config.in_channels}")
        probs = sliding_window_predict(net, zscore_normalize(vol))
        odsv.save_volume(Volume(probs, vol.spacing), out / f"{cid}_prob.odsv")
        odsv.save_volume(LabelMask(logits_to_mask(probs), vol.spacing), out / f"{cid}_pred.odsv")
        log.info("predicted %s", cid)


def cmd_postprocess(cfg: RunConfig):
    src = _require(cfg.paths.predictions_dir, "predictions directory")
    out = Path(cfg.paths.postprocess_dir)
    out.mkdir(parents=True, exist_ok=True)
    _run_log(out, "postprocess", cfg)
    files = sorted(src.glob("*_prob.odsv"))
    if not files:
        raise CliError(EXIT_MISSING, f"no *_prob.odsv files in {src}")
    for f in files:
        vol = _load(f, "volume")
        labels = postprocess(vol.values, cfg.postprocess)
        cid = f.name[: -len("_prob.odsv")]
        odsv.save_volume(LabelMask(labels, vol.spacing), out / f"{cid}{cfg.paths.label_suffix}.odsv")


def cmd_merge(cfg: RunConfig):
    a_dir = _require(cfg.paths.merge_a or cfg.paths.predictions_dir, "merge input a")
    b_dir = _require(cfg.paths.merge_b, "merge input b") if cfg.paths.merge_b else None
    if b_dir is None:
        raise CliError(EXIT_USAGE, "paths.merge_b is required")
    out = Path(cfg.paths.merge_out)
    out.mkdir(parents=True, exist_ok=True)
    _run_log(out, "merge", cfg)
    pattern = f"*{cfg.paths.label_suffix}.odsv"
    files = sorted(a_dir.glob(pattern))
    if not files:
        raise CliError(EXIT_MISSING, f"no {pattern} files in {a_dir}")
    for fa in files:
        a = _load(fa, "labels")
        b = _load(b_dir / fa.name, "labels")
        if a.extents != b.extents:
            raise CliError(EXIT_EXTENTS, f"{fa.name}: {a.extents} vs {b.extents}")
        merged = merge_label(a, b, cfg.merge.label, cfg.merge.mode)
        odsv.save_volume(LabelMask(merged, a.spacing), out / fa.name)


def cmd_evaluate(cfg: RunConfig):
    labels_dir = Path(cfg.paths.labels_dir or cfg.paths.predictions_dir)
    _require(labels_dir, "labels directory")
    out = Path(cfg.paths.report_dir)
    out.mkdir(parents=True, exist_ok=True)
    _run_log(out, "evaluate", cfg)
    pairs = []
    for cid, _, mpath in read_manifest(cfg.paths.resolved_manifest()):
        gt = _load(mpath, "labels")
        pred = _load(labels_dir / f"{cid}{cfg.paths.label_suffix}.odsv", "labels")
        if pred.extents != gt.extents:
            raise CliError(EXIT_EXTENTS, f"{cid}: prediction {pred.extents} vs truth {gt.extents}")
        pairs.append((cid, pred, gt))
    report = evaluate_set(pairs)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.json").write_text(report.to_json())
    for region, vals in report.aggregate.items():
        log.info("%s dice %.4f lesion %.4f hd95 %.3f", region, vals["dice"],
                 vals["lesion_dice"], vals["hd95"])


LABEL_COLORS = np.array([[0, 0, 0], [255, 64, 64], [64, 200, 64], [255, 230, 0]], dtype=np.uint8)


def write_pgm(path, img):
    img = np.asarray(img, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


def write_ppm(path, rgb):
    rgb = np.asarray(rgb, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode())
        fh.write(rgb.tobytes())


def read_pnm(path):
    """Minimal reader for the P5/P6 files written here."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    magic, (w, h), _ = parts[0], map(int, parts[1].split()), parts[2]
    arr = np.frombuffer(parts[3], dtype=np.uint8)
    return arr.reshape(h, w, 3) if magic == b"P6" else arr.reshape(h, w)


def render_slice(values):
    lo, hi = float(values.min()), float(values.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    return np.round((values - lo) * scale).astype(np.uint8)


def cmd_overlay(cfg: RunConfig):
    out = Path(cfg.paths.overlay_dir)
    out.mkdir(parents=True, exist_ok=True)
    _run_log(out, "overlay", cfg)
    labels_dir = Path(cfg.paths.labels_dir or cfg.paths.predictions_dir)
    for cid, vpath, mpath in read_manifest(cfg.paths.resolved_manifest()):
        if cfg.paths.case and cid != cfg.paths.case:
            continue
        vol = _load(vpath, "volume")
        gt = _load(mpath, "labels")
        z = vol.extents[0] // 2
        for c in range(vol.channels):
            write_pgm(out / f"{cid}_ch{c}.pgm", render_slice(vol.values[c, z]))
        write_ppm(out / f"{cid}_gt.ppm", LABEL_COLORS[gt.labels[z]])
        pred_path = labels_dir / f"{cid}{cfg.paths.label_suffix}.odsv"
        if pred_path.exists():
            pred = _load(pred_path, "labels")
            write_ppm(out / f"{cid}_pred.ppm", LABEL_COLORS[pred.labels[z]])


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "predict": cmd_predict,
    "postprocess": cmd_postprocess,
    "merge": cmd_merge,
    "evaluate": cmd_evaluate,
    "overlay": cmd_overlay,
}


def _parse_overrides(extra):
    overrides, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for {tok}")
            value = extra[i + 1]
            i += 2
        overrides[key] = value
    return overrides


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="odseg", description=__doc__.splitlines()[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="run configuration file")
    parser.add_argument("-q", "--quiet", action="store_true")
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config is not None and not os.path.exists(args.config):
            raise CliError(EXIT_MISSING, f"config file not found: {args.config}")
        cfg = load_config(args.config, _parse_overrides(extra))
        with _thread_limit(cfg.train.threads):
            COMMANDS[args.command](cfg)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except CliError as exc:
        log.error("%s", exc)
        return exc.code
    except Exception:  # noqa: BLE001
        log.exception("unexpected failure")
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
