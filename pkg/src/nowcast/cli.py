"""``nowcast`` command line: ingest | synth | train | evaluate | plot."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from nowcast import __version__
from nowcast.baselines import BaselineForecast, convlstm_rollout_batch, fit_convlstm, persistence_forecast
from nowcast.config import ConfigError, ExperimentConfig, load_config
from nowcast.data import (DataError, chronological_split, count_gaps, crop_boxes, load_dataset,
                          read_granule, save_dataset, stack_sequences, synth_advection, window_sequences)
from nowcast.dyffusion import (DyffusionState, EnsembleForecast, fit_forecastor, fit_interpolator,
                               member_seeds, rollout_batch)
from nowcast.metrics import MetricAccumulator, write_reports
from nowcast.networks import (CheckpointError, ConvLSTM, UNet, load_checkpoint, save_checkpoint)

log = logging.getLogger("nowcast")

STAGES = ("interpolator", "forecastor", "convlstm")


class PrerequisiteError(RuntimeError):
    pass


# -- run bookkeeping -----------------------------------------------------


@contextlib.contextmanager
def output_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"{out_dir} is locked by another invocation (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def write_manifest(cfg: ExperimentConfig, stage: str, **fields) -> Path:
    """Write a new manifest; existing manifests are never overwritten."""
    mdir = cfg.output_dir / "manifests"
    mdir.mkdir(parents=True, exist_ok=True)
    path = mdir / f"{stage}.json"
    k = 1
    while path.exists():
        path = mdir / f"{stage}.{k}.json"
        k += 1
    body = {"stage": stage, "config_hash": cfg.training_hash(), "code_version": __version__,
            "preset": cfg.raw.get("preset"), "seed": cfg.seed}
    body.update(fields)
    path.write_text(json.dumps(body, indent=2, sort_keys=True, default=str) + "\n")
    return path


def dataset_path(cfg: ExperimentConfig) -> Path:
    return cfg.output_dir / "data" / "dataset"


def checkpoint_path(cfg: ExperimentConfig, name: str) -> Path:
    return cfg.output_dir / "checkpoints" / f"{name}.pt"


def load_splits(cfg: ExperimentConfig):
    path = dataset_path(cfg)
    if not path.with_suffix(".npy").exists():
        raise PrerequisiteError(f"no dataset at {path}.npy; run `nowcast synth` or `nowcast ingest` first")
    seqs = load_dataset(path)
    if seqs[0].spec.fingerprint() != cfg.spec.fingerprint():
        raise CheckpointError("dataset normalization does not match the config")
    return chronological_split(seqs, tuple(cfg.data["split"]))


# -- subcommands ---------------------------------------------------------


def cmd_synth(cfg: ExperimentConfig) -> dict:
    seqs = synth_advection(cfg.synthetic_config(), cfg.spec)
    arr, meta = save_dataset(dataset_path(cfg), seqs, extra={"source": "synthetic"})
    summary = {"sequences": len(seqs), "frames": len(seqs) * seqs[0].frames.shape[0], "gaps": 0}
    print(f"synthetic dataset: {summary['sequences']} sequences -> {arr}")
    write_manifest(cfg, "synth", outputs=[str(arr), str(meta)], summary=summary)
    return summary


def cmd_ingest(cfg: ExperimentConfig) -> dict:
    gdir = cfg.granule_dir()
    paths = sorted(gdir.glob(cfg.data["granule_glob"]))
    if not paths:
        raise DataError(f"no granules matching {cfg.data['granule_glob']!r} in {gdir}")
    fields = sorted((read_granule(p, cfg.data["dataset_path"]) for p in paths), key=lambda f: f.timestamp)
    boxes = [tuple(b) for b in cfg.data["boxes"]]
    per_box = [[] for _ in boxes]
    for f in fields:
        for k, crop in enumerate(crop_boxes(f, boxes, int(cfg.data["box_size"]))):
            per_box[k].append(crop)
    gaps = count_gaps([f.timestamp for f in fields])
    seqs = []
    for frames in per_box:
        if len(frames) >= cfg.context + cfg.h:
            seqs.extend(window_sequences(frames, cfg.h, int(cfg.data["stride"]), cfg.context, cfg.spec))
    if not seqs:
        raise DataError(f"no complete {cfg.context + cfg.h}-frame windows among {len(fields)} granules")
    seqs.sort(key=lambda s: s.start_time)
    arr, meta = save_dataset(dataset_path(cfg), seqs, extra={"source": "imerg", "boxes": cfg.data["boxes"]})
    summary = {"granules": len(fields), "frames": len(fields), "gaps": gaps, "sequences": len(seqs)}
    print(f"ingested {len(fields)} frames, {gaps} gap(s), {len(seqs)} sequence(s) -> {arr}")
    if gaps:
        log.warning("%d cadence gap(s); windows spanning them were skipped", gaps)
    write_manifest(cfg, "ingest", outputs=[str(arr), str(meta)], summary=summary)
    return summary


def _model_tags(cfg: ExperimentConfig):
    return {"dyffusion": f"dyffusion_{cfg.train['dyffusion_loss']}",
            "convlstm": f"convlstm_{cfg.train['convlstm_loss']}"}


def cmd_train(cfg: ExperimentConfig, stage: str, resume: bool = False) -> dict:
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; choose from {STAGES}")
    train_seqs, _, _ = load_splits(cfg)
    data = stack_sequences(train_seqs)
    chash, fp = cfg.training_hash(), cfg.spec.fingerprint()
    tr = cfg.train
    torch.manual_seed(cfg.seed)
    tags = _model_tags(cfg)

    if stage == "interpolator":
        name, kind, total = "interpolator", "unet", int(tr["epochs_interpolator"])
        model = UNet(cfg.interpolator_config())
        loss_fn = cfg.loss_spec(tr["dyffusion_loss"])
        runner = lambda **kw: fit_interpolator(model, data, context=cfg.context, loss_fn=loss_fn, spec=cfg.spec, **kw)
    elif stage == "forecastor":
        ipath = checkpoint_path(cfg, "interpolator")
        if not ipath.exists():
            raise PrerequisiteError(f"forecastor training requires an interpolator checkpoint at {ipath}")
        interp, meta = load_checkpoint(ipath, kind="unet", cfg_hash=chash, spec_fingerprint=fp)
        if meta["epoch"] + 1 < int(tr["epochs_interpolator"]):
            raise PrerequisiteError(f"interpolator checkpoint stops at epoch {meta['epoch']}; finish stage 1 first")
        name, kind, total = "forecastor", "unet", int(tr["epochs_forecastor"])
        model = UNet(cfg.forecastor_config())
        state = DyffusionState(interp, model, h=cfg.h)
        loss_fn = cfg.loss_spec(tr["dyffusion_loss"])
        runner = lambda **kw: fit_forecastor(state, data, context=cfg.context, loss_fn=loss_fn, spec=cfg.spec,
                                             composite=cfg.composite, **kw)
    else:
        name, kind, total = tags["convlstm"], "convlstm", int(tr["epochs_convlstm"])
        model = ConvLSTM(cfg.convlstm_config())
        loss_fn = cfg.loss_spec(tr["convlstm_loss"])
        runner = lambda **kw: fit_convlstm(model, data, context=cfg.context, loss_fn=loss_fn, spec=cfg.spec, **kw)

    ckpt = checkpoint_path(cfg, name)
    start_epoch, history, opt_state = 0, [], None
    if resume and ckpt.exists():
        restored, meta = load_checkpoint(ckpt, kind=kind, cfg_hash=chash, spec_fingerprint=fp)
        model.load_state_dict(restored.state_dict())
        start_epoch, history, opt_state = meta["epoch"] + 1, list(meta["loss_history"]), meta["optimizer"]
        log.info("resuming %s at epoch %d", name, start_epoch)
    elif ckpt.exists():
        log.info("overwriting existing checkpoint %s", ckpt)

    def on_epoch_end(epoch, hist, opt):
        save_checkpoint(ckpt, model, kind=kind, cfg_hash=chash, spec_fingerprint=fp, epoch=epoch,
                        extra={"loss_history": history + hist, "optimizer": opt.state_dict(), "name": name})

    t0 = time.perf_counter()
    hist, _ = runner(epochs=max(total - start_epoch, 0), batch_size=int(tr["batch_size"]), lr=float(tr["lr"]),
                     seed=cfg.seed, start_epoch=start_epoch, optimizer_state=opt_state, on_epoch_end=on_epoch_end)
    elapsed = time.perf_counter() - t0
    history = history + hist
    log_dir = cfg.output_dir / "logs"
    log_dir.mkdir(parents=True, exist_ok=True)
    (log_dir / f"{name}_loss.csv").write_text(
        "epoch,loss\n" + "".join(f"{k},{v!r}\n" for k, v in enumerate(history)))
    write_manifest(cfg, f"train-{name}", checkpoint_paths=[str(ckpt)], loss_history=history,
                   timings={"train_s": elapsed})
    print(f"{name}: {len(history)} epochs, final loss {history[-1] if history else float('nan'):.6f}")
    return {"name": name, "loss_history": history, "checkpoint": str(ckpt)}


def _forecasters(cfg: ExperimentConfig, models):
    fp = cfg.spec.fingerprint()
    tags = _model_tags(cfg)
    out = {}
    for m in models:
        if m == "persistence":
            out["persistence"] = ("deterministic", lambda ctx, x0, seeds: persistence_forecast(x0[0].numpy(), cfg.h).frames[None])
        elif m in ("dyffusion", tags["dyffusion"]):
            interp, _ = load_checkpoint(checkpoint_path(cfg, "interpolator"), kind="unet", spec_fingerprint=fp)
            fore, _ = load_checkpoint(checkpoint_path(cfg, "forecastor"), kind="unet", spec_fingerprint=fp)
            state = DyffusionState(interp.eval(), fore.eval(), h=cfg.h)
            out[tags["dyffusion"]] = ("ensemble", lambda ctx, x0, seeds, st=state: rollout_batch(x0, st, seeds).numpy())
        elif m in ("convlstm", "convlstm_lcb", "convlstm_bce"):
            tag = tags["convlstm"] if m == "convlstm" else m
            model, _ = load_checkpoint(checkpoint_path(cfg, tag), kind="convlstm", spec_fingerprint=fp)
            model.eval()
            out[tag] = ("deterministic", lambda ctx, x0, seeds, mdl=model: convlstm_rollout_batch(mdl, ctx, cfg.h).numpy())
        else:
            raise ConfigError(f"unknown model {m!r}")
    return out


def cmd_evaluate(cfg: ExperimentConfig, models=None, include_time: bool = True) -> dict:
    _, _, test = load_splits(cfg)
    if cfg.eval.get("max_samples"):
        test = test[: int(cfg.eval["max_samples"])]
    if not test:
        raise PrerequisiteError("test split is empty")
    models = list(models or cfg.eval["models"])
    X = int(cfg.eval["members"])
    T = cfg.convlstm_config().context_frames
    if test[0].context < T and any(m.startswith("convlstm") for m in models):
        raise ConfigError(f"dataset has {test[0].context} context frames; ConvLSTM needs {T}")
    reports, manifests = {}, {}
    fdir = cfg.output_dir / "reports" / "forecasts"
    fdir.mkdir(parents=True, exist_ok=True)
    for tag, (kind, fn) in _forecasters(cfg, models).items():
        acc = MetricAccumulator(cfg.spec, cfg.eval["thresholds"], fair_crps=bool(cfg.eval["fair_crps"]))
        means, all_seeds = [], []
        for i, seq in enumerate(test):
            frames = torch.tensor(seq.frames)
            ctx = frames[None, seq.context - T:seq.context] if seq.context >= T else None
            x0 = frames[None, seq.context - 1]
            seeds = member_seeds([cfg.seed, i], X) if kind == "ensemble" else []
            t0 = time.perf_counter()
            out = fn(ctx, x0, seeds)[0]
            dt = time.perf_counter() - t0
            if kind == "ensemble":
                fc = EnsembleForecast(members=out, member_seeds=seeds)
                means.append(out.mean(axis=0))
            else:
                fc = BaselineForecast(frames=out, model_tag=tag)
                means.append(out)
            acc.add(fc, seq, dt)
            all_seeds.append(seeds)
        reports[tag] = acc.report()
        np.save(fdir / f"{tag}.npy", np.stack(means).astype(np.float32))
        manifests[tag] = fdir / f"{tag}.json"
        manifests[tag].write_text(json.dumps({
            "model_tag": tag, "kind": kind, "members": X if kind == "ensemble" else 1,
            "member_seeds": all_seeds, "config_hash": cfg.training_hash(),
            "spec_fingerprint": cfg.spec.fingerprint(), "h": cfg.h,
            "start_times": [s.start_time.isoformat() for s in test],
        }, indent=2, sort_keys=True) + "\n")
    paths = write_reports(cfg.output_dir / "reports", reports, include_time)
    write_manifest(cfg, "evaluate", report_paths={k: str(v) for k, v in paths.items()},
                   timings={k: r.wall_time_s for k, r in reports.items()})
    print((cfg.output_dir / "reports" / "table.csv").read_text(encoding="utf-8"), end="")
    return {"reports": reports, "paths": paths}


def cmd_plot(cfg: ExperimentConfig) -> list[Path]:
    from nowcast.plotting import plot_degradation, plot_panels

    _, _, test = load_splits(cfg)
    fdir = cfg.output_dir / "reports" / "forecasts"
    manifests = sorted(fdir.glob("*.json"))
    if not manifests:
        raise PrerequisiteError(f"no forecast manifests in {fdir}; run `nowcast evaluate` first")
    forecasts = {}
    for mpath in manifests:
        meta = json.loads(mpath.read_text())
        arr = np.load(mpath.with_suffix(".npy"))
        forecasts[meta["model_tag"]] = (meta, arr)
    k = int(cfg.eval.get("plot_sample", 0))
    truth = test[k]
    fig_dir = cfg.output_dir / "figures"
    panel = plot_panels(truth, {t: (m, a[k]) for t, (m, a) in forecasts.items()}, cfg.spec,
                        fig_dir / "panels.png")
    reports = {t: json.loads((cfg.output_dir / "reports" / f"metrics_{t}.json").read_text()) for t in forecasts}
    curves = plot_degradation(reports, fig_dir / "degradation.png")
    print(f"wrote {panel} and {curves}")
    return [panel, curves]


# -- entry point ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nowcast", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("ingest", "synth", "train", "evaluate", "plot"):
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, default=None)
        s.add_argument("--preset", choices=("synth", "full"), default=None)
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--output-dir", type=Path, default=None)
        if name == "train":
            s.add_argument("--stage", choices=STAGES, required=True)
            s.add_argument("--resume", action="store_true")
        if name == "evaluate":
            s.add_argument("--models", default=None, help="comma-separated model names")
            s.add_argument("--no-time", action="store_true", help="render the Time column as a dash")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    torch.use_deterministic_algorithms(True)
    overrides = {"output_dir": str(args.output_dir.resolve())} if args.output_dir else None
    try:
        cfg = load_config(args.config, args.preset, args.seed, overrides)
        with output_lock(cfg.output_dir):
            if args.command == "synth":
                cmd_synth(cfg)
            elif args.command == "ingest":
                cmd_ingest(cfg)
            elif args.command == "train":
                cmd_train(cfg, args.stage, args.resume)
            elif args.command == "evaluate":
                models = args.models.split(",") if args.models else None
                cmd_evaluate(cfg, models, include_time=not args.no_time)
            else:
                cmd_plot(cfg)
    except (ConfigError, DataError, CheckpointError, PrerequisiteError, RuntimeError, FileNotFoundError) as exc:
        print(f"nowcast {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
