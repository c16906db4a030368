"""Command-line entry point tying the phases into reproducible runs.

Commands: gendata, pretrain, search, train, derive, eval, flops. Each run
command writes, into the output directory: a rolling checkpoint per epoch, a
metrics CSV with a fixed column order, a manifest (command, config hash,
seed, resolved config) and a rendered figure next to the CSV. Every run is
fully reproducible from (config file, seed); resuming an interrupted phase
from its checkpoint continues the identical trajectory.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import __version__, checkpoint as ckpt_mod, config as config_mod, dataio, derive, engine, figures, searchspace
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, restore_rng, rng_state, save_checkpoint
from .config import ConfigError
from .engine import DerivedModel, EngineError, TeacherModel, sub_seed

METRIC_COLUMNS = [
    "epoch",
    "phase",
    "loss_content",
    "loss_efficiency",
    "loss_order",
    "r_value",
    "psnr_val",
    "nnz_alpha",
    "nnz_beta",
    "wall_seconds",
]


class CliError(RuntimeError):
    pass


class _PhaseStopped(Exception):
    """Raised by the epoch hook when --stop-after is hit."""


# ---------------------------------------------------------------------------
# run-directory plumbing


class _RunLock:
    def __init__(self, out_dir):
        self.path = os.path.join(out_dir, ".lock")
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CliError(
                f"run directory is locked by another process ({self.path}); remove the stale lock if none is running"
            ) from None
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            os.unlink(self.path)
        return False


class MetricsFile:
    """CSV writer with the fixed column order; resuming keeps earlier rows."""

    def __init__(self, path, keep_up_to=None):
        rows = []
        if keep_up_to is not None and os.path.exists(path):
            with open(path, newline="") as fh:
                rows = [r for r in csv.DictReader(fh) if int(r["epoch"]) <= keep_up_to]
        self.fh = open(path, "w", newline="")
        self.writer = csv.DictWriter(self.fh, fieldnames=METRIC_COLUMNS)
        self.writer.writeheader()
        for r in rows:
            self.writer.writerow(r)
        self.fh.flush()

    def append(self, row):
        out = dict(row)
        out["wall_seconds"] = f"{row['wall_seconds']:.3f}"
        self.writer.writerow(out)
        self.fh.flush()

    def close(self):
        self.fh.close()


def _write_manifest(out_dir, phase, cfg):
    path = os.path.join(out_dir, f"manifest_{phase}.txt")
    with open(path, "w") as fh:
        fh.write(f"command {phase}\n")
        fh.write(f"package tnas {__version__}\n")
        fh.write(f"config_hash {config_mod.config_hash(cfg)}\n")
        fh.write(f"seed {cfg.seed}\n")
        fh.write("config_begin\n")
        fh.write(config_mod.dump_config(cfg))
        fh.write("config_end\n")


def _datasets(cfg):
    """Deterministic corpus: training pairs, their halves, and the holdout."""
    total = cfg.data_count + cfg.holdout_count
    images = dataio.gen_synthetic(sub_seed(cfg.seed, "data"), total, cfg.image_h, cfg.image_w)
    pairs = dataio.make_pairs(images, cfg.scale)
    train = pairs[: cfg.data_count]
    holdout = pairs[cfg.data_count :]
    chi1, chi2 = dataio.split(train, cfg.seed)
    return train, chi1, chi2, holdout


def _build_net(cfg):
    rng = np.random.default_rng(sub_seed(cfg.seed, "init"))
    return searchspace.build_supernet(cfg, rng)


def _net_tensor_map(net):
    named = {}
    for name, t in net.parameters():
        named[f"w.{name}"] = t
    for name, t in net.arch_parameters():
        named[f"arch.{name}"] = t
    return named


def _pack_adam(prefix, adam):
    return {f"{prefix}.{suffix}": arr for suffix, arr in adam.state_arrays()}


def _load_adam(prefix, adam, ck):
    arrays = {}
    for name, arr in ck.tensors.items():
        if name.startswith(prefix + "."):
            arrays[name[len(prefix) + 1 :]] = arr
    if arrays:
        adam.load_state_arrays(arrays, ck.adam_t.get(prefix, 0))


def _restore_tensors(tensor_objs, ck, required_prefixes):
    for name, t in tensor_objs.items():
        if name not in ck.tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name}")
        arr = ck.tensors[name]
        if arr.shape != t.data.shape:
            raise CheckpointError(
                f"checkpoint tensor {name} has shape {arr.shape}, expected {t.data.shape}"
            )
        t.data = arr.astype(t.data.dtype, copy=False)
    for pref in required_prefixes:
        if not any(k.startswith(pref) for k in ck.tensors):
            raise CheckpointError(f"checkpoint has no {pref} tensors")


def _check_hash(ck, cfg, path, exclude=()):
    """Refuse to mix runs: configs must agree on every field that shapes the
    checkpointed phase. Fields that only act downstream of that phase are
    excluded by the caller."""
    want = config_mod.config_hash(cfg, exclude)
    theirs_cfg = config_mod.resolve(config_mod.parse_config(ck.config_text))
    got = config_mod.config_hash(theirs_cfg, exclude)
    if got != want:
        raise CheckpointError(
            f"{path}: checkpoint config hash {got} does not match current config {want};"
            " refusing to mix runs"
        )


def _save_phase_ckpt(path, phase, epoch, cfg, rng, tensor_map, adams, r_step=0, scalars=None):
    tensors = {name: t.data for name, t in tensor_map.items()}
    adam_t = {}
    for prefix, adam in adams.items():
        tensors.update(_pack_adam(prefix, adam))
        adam_t[prefix] = adam.t
    ck = Checkpoint(
        phase=phase,
        epoch=epoch,
        config_text=config_mod.dump_config(cfg),
        config_hash=config_mod.config_hash(cfg),
        seed=cfg.seed,
        r_step=r_step,
        rng_state=rng_state(rng),
        adam_t=adam_t,
        scalars=scalars or {},
        tensors=tensors,
    )
    save_checkpoint(path, ck)


# ---------------------------------------------------------------------------
# commands


def _cmd_gendata(args, cfg, out_dir):
    train, _, _, holdout = _datasets(cfg)
    data_dir = os.path.join(out_dir, "data")
    os.makedirs(data_dir, exist_ok=True)
    lines = ["id role height width file"]
    for role, pairs in (("train", train), ("holdout", holdout)):
        for p in pairs:
            name = f"img_{p.id:04d}.pgm"
            dataio.write_pgm(os.path.join(data_dir, name), p.hr)
            lines.append(f"{p.id} {role} {cfg.image_h} {cfg.image_w} {name}")
    with open(os.path.join(data_dir, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    _write_manifest(out_dir, "gendata", cfg)
    print(f"wrote {len(train)} train + {len(holdout)} holdout images to {data_dir}")
    return 0


def _epoch_hook(metrics, save_fn, stop_after):
    def on_epoch(epoch, row):
        metrics.append(row)
        save_fn(epoch)
        if stop_after is not None and epoch >= stop_after:
            raise _PhaseStopped()

    return on_epoch


def _cmd_pretrain(args, cfg, out_dir):
    _, chi1, _, holdout = _datasets(cfg)
    teacher = TeacherModel(cfg.scale, cfg.seed)
    net = _build_net(cfg)
    tensor_map = _net_tensor_map(net)
    params = [t for _, t in net.parameters()]
    adam = engine.Adam(params, cfg.lr_w)
    start_epoch = 0
    if args.resume:
        ck = load_checkpoint(args.resume)
        if ck.phase != "pretrain":
            raise CheckpointError(f"{args.resume}: expected a pretrain checkpoint, found {ck.phase}")
        _check_hash(ck, cfg, args.resume, config_mod.SEARCH_ONLY_FIELDS)
        _restore_tensors(tensor_map, ck, ["w."])
        _load_adam("adam_w", adam, ck)
        rng = restore_rng(ck.rng_state)
        start_epoch = ck.epoch
    else:
        rng = np.random.default_rng(sub_seed(cfg.seed, "run"))
    ckpt_path = os.path.join(out_dir, "pretrain.tnas")
    metrics = MetricsFile(
        os.path.join(out_dir, "metrics_pretrain.csv"),
        keep_up_to=start_epoch if args.resume else None,
    )

    def save_fn(epoch):
        _save_phase_ckpt(ckpt_path, "pretrain", epoch, cfg, rng, tensor_map, {"adam_w": adam})

    stopped = False
    try:
        engine.pretrain(
            net, chi1, cfg, rng, teacher,
            val_pairs=holdout[: min(8, len(holdout))],
            start_epoch=start_epoch, adam=adam,
            on_epoch=_epoch_hook(metrics, save_fn, args.stop_after),
        )
    except _PhaseStopped:
        stopped = True
    metrics.close()
    if cfg.t1 == 0 and start_epoch == 0:
        save_fn(0)
    figures.render_metrics(os.path.join(out_dir, "metrics_pretrain.csv"),
                           os.path.join(out_dir, "metrics_pretrain.png"))
    _write_manifest(out_dir, "pretrain", cfg)
    print(f"pretrain {'stopped early' if stopped else 'done'}: checkpoint {ckpt_path}")
    return 0


def _cmd_search(args, cfg, out_dir):
    _, chi1, chi2, holdout = _datasets(cfg)
    teacher = TeacherModel(cfg.scale, cfg.seed)
    net = _build_net(cfg)
    tensor_map = _net_tensor_map(net)
    w_params = [t for _, t in net.parameters()]
    arch_params = [t for _, t in net.arch_parameters()]
    adam_w = engine.Adam(w_params, cfg.lr_w)
    adam_arch = engine.Adam(arch_params, cfg.lr_arch)
    resume_path = args.resume or os.path.join(out_dir, "pretrain.tnas")
    if not os.path.exists(resume_path):
        raise CliError(f"search needs a pretrain checkpoint; not found at {resume_path}")
    ck = load_checkpoint(resume_path)
    state = {"r_step": 0}
    start_epoch = 0
    if ck.phase == "search":
        _check_hash(ck, cfg, resume_path, config_mod.FINAL_ONLY_FIELDS)
        _restore_tensors(tensor_map, ck, ["w.", "arch."])
        _load_adam("adam_w", adam_w, ck)
        _load_adam("adam_arch", adam_arch, ck)
        state["r_step"] = ck.r_step
        start_epoch = ck.epoch
    elif ck.phase == "pretrain":
        _check_hash(ck, cfg, resume_path, config_mod.SEARCH_ONLY_FIELDS)
        _restore_tensors(tensor_map, ck, ["w."])
        _load_adam("adam_w", adam_w, ck)
    else:
        raise CheckpointError(f"{resume_path}: cannot start search from a {ck.phase} checkpoint")
    rng = restore_rng(ck.rng_state)
    ckpt_path = os.path.join(out_dir, "search.tnas")
    metrics = MetricsFile(
        os.path.join(out_dir, "metrics_search.csv"),
        keep_up_to=start_epoch if ck.phase == "search" else None,
    )

    def save_fn(epoch, scalars=None):
        _save_phase_ckpt(
            ckpt_path, "search", epoch, cfg, rng, tensor_map,
            {"adam_w": adam_w, "adam_arch": adam_arch},
            r_step=state["r_step"], scalars=scalars,
        )

    stopped = False
    try:
        engine.search(
            net, chi1, chi2, cfg, rng, teacher,
            val_pairs=holdout[: min(8, len(holdout))],
            start_epoch=start_epoch, adam_w=adam_w, adam_arch=adam_arch, state=state,
            on_epoch=_epoch_hook(metrics, lambda e: save_fn(e), args.stop_after),
        )
    except _PhaseStopped:
        stopped = True
    metrics.close()
    if not stopped:
        arch = derive.derive_architecture(net)
        loss = engine.final_search_loss(net, chi2, cfg, teacher)
        save_fn(cfg.t2, scalars={
            "final_search_loss": loss,
            "path": arch.path_string(),
            "arch_text": derive.arch_to_text(arch),
        })
        print(f"search done: path {arch.path_string()}, final loss {loss:.6g}")
    else:
        print("search stopped early")
    figures.render_metrics(os.path.join(out_dir, "metrics_search.csv"),
                           os.path.join(out_dir, "metrics_search.png"))
    _write_manifest(out_dir, "search", cfg)
    return 0


def _derived_from_search_ckpt(ck, cfg):
    """Rebuild the supernet from a completed search checkpoint and derive."""
    net = _build_net(cfg)
    _restore_tensors(_net_tensor_map(net), ck, ["w.", "arch."])
    arch = derive.derive_architecture(net)
    return net, arch


def _cmd_train(args, cfg, out_dir):
    train_pairs, _, chi2, holdout = _datasets(cfg)
    teacher = TeacherModel(cfg.scale, cfg.seed)
    ckpt_path = os.path.join(out_dir, "final.tnas")
    resume_path = args.resume or os.path.join(out_dir, "search.tnas")
    start_epoch = 0
    adam = None
    if args.arch:
        if cfg.train_mode != "from_scratch":
            raise CliError("--arch provides no weights; use --train-mode from_scratch with it")
        with open(args.arch) as fh:
            arch = derive.arch_from_text(fh.read())
        model = DerivedModel(arch, cfg, rng=np.random.default_rng(sub_seed(cfg.seed, "final_init")))
        rng = np.random.default_rng(sub_seed(cfg.seed, "final_run"))
    else:
        if not os.path.exists(resume_path):
            raise CliError(f"train needs a search checkpoint (or --arch); not found at {resume_path}")
        ck = load_checkpoint(resume_path)
        if ck.phase == "final":
            _check_hash(ck, cfg, resume_path)
            arch = derive.arch_from_text(ck.scalars["arch_text"])
            if cfg.train_mode == "from_search":
                model = DerivedModel(arch, cfg, net=None, rng=None, alloc_full=True)
            else:
                model = DerivedModel(
                    arch, cfg, rng=np.random.default_rng(sub_seed(cfg.seed, "final_init"))
                )
            named = {f"m.{n}": t for n, t in model.parameters()}
            _restore_tensors(named, ck, ["m."])
            adam = engine.Adam([t for _, t in model.parameters()], cfg.lr_w)
            _load_adam("adam_w", adam, ck)
            rng = restore_rng(ck.rng_state)
            start_epoch = ck.epoch
        elif ck.phase == "search":
            _check_hash(ck, cfg, resume_path, config_mod.FINAL_ONLY_FIELDS)
            if ck.epoch < cfg.t2:
                raise CliError(f"{resume_path}: search incomplete (epoch {ck.epoch}/{cfg.t2})")
            net, arch = _derived_from_search_ckpt(ck, cfg)
            if cfg.train_mode == "from_search":
                model = DerivedModel(arch, cfg, net=net)
            else:
                model = DerivedModel(
                    arch, cfg, rng=np.random.default_rng(sub_seed(cfg.seed, "final_init"))
                )
            rng = restore_rng(ck.rng_state)
        else:
            raise CheckpointError(f"{resume_path}: cannot train from a {ck.phase} checkpoint")
    if adam is None:
        adam = engine.Adam([t for _, t in model.parameters()], cfg.lr_w)
    metrics = MetricsFile(
        os.path.join(out_dir, "metrics_final.csv"),
        keep_up_to=start_epoch if start_epoch else None,
    )
    model_map = {f"m.{n}": t for n, t in model.parameters()}

    def save_fn(epoch):
        _save_phase_ckpt(
            ckpt_path, "final", epoch, cfg, rng, model_map, {"adam_w": adam},
            scalars={"arch_text": derive.arch_to_text(model.arch), "path": model.arch.path_string()},
        )

    stopped = False
    try:
        engine.train_final(
            model, train_pairs, cfg, rng, teacher,
            val_pairs=holdout[: min(8, len(holdout))],
            start_epoch=start_epoch, adam=adam,
            on_epoch=_epoch_hook(metrics, save_fn, args.stop_after),
        )
    except _PhaseStopped:
        stopped = True
    metrics.close()
    if cfg.t3 == 0 and start_epoch == 0:
        save_fn(0)
    figures.render_metrics(os.path.join(out_dir, "metrics_final.csv"),
                           os.path.join(out_dir, "metrics_final.png"))
    _write_manifest(out_dir, "train", cfg)
    if cfg.t3 == 0:
        loss = engine.evaluate_content(model.forward, chi2, cfg, teacher)
        print(f"train (t3=0): evaluation loss {loss!r}")
    print(f"train {'stopped early' if stopped else 'done'}: checkpoint {ckpt_path}")
    return 0


def _cmd_derive(args, cfg, out_dir):
    resume_path = args.resume or os.path.join(out_dir, "search.tnas")
    if not os.path.exists(resume_path):
        raise CliError(f"derive needs a search checkpoint; not found at {resume_path}")
    ck = load_checkpoint(resume_path)
    if ck.phase != "search":
        raise CheckpointError(f"{resume_path}: derive expects a search checkpoint, found {ck.phase}")
    _check_hash(ck, cfg, resume_path, config_mod.FINAL_ONLY_FIELDS)
    _, arch = _derived_from_search_ckpt(ck, cfg)
    text = derive.arch_to_text(arch)
    arch_path = os.path.join(out_dir, "arch.txt")
    with open(arch_path, "w") as fh:
        fh.write(text)
    _write_manifest(out_dir, "derive", cfg)
    print(arch.path_string())
    print(f"params {derive.count_params(arch)}")
    print(f"flops {derive.count_flops(arch, cfg.flops_h, cfg.flops_w)} at {cfg.flops_h}x{cfg.flops_w}")
    print(f"arch written to {arch_path}")
    return 0


def _cmd_eval(args, cfg, out_dir):
    if args.pred or args.target:
        if not (args.pred and args.target):
            raise CliError("file mode needs both --pred and --target")
        a = dataio.read_pgm(args.pred)
        b = dataio.read_pgm(args.target)
        val = dataio.psnr(a, b)
        print(f"psnr {val!r}")
        return 0
    resume_path = args.resume or os.path.join(out_dir, "final.tnas")
    if not os.path.exists(resume_path):
        raise CliError(f"eval needs a final checkpoint; not found at {resume_path}")
    ck = load_checkpoint(resume_path)
    _check_hash(ck, cfg, resume_path)
    if ck.phase != "final":
        raise CheckpointError(f"{resume_path}: eval expects a final checkpoint, found {ck.phase}")
    arch = derive.arch_from_text(ck.scalars["arch_text"])
    if cfg.train_mode == "from_search":
        model = DerivedModel(arch, cfg, net=None, rng=None, alloc_full=True)
    else:
        model = DerivedModel(arch, cfg, rng=np.random.default_rng(0))
    named = {f"m.{n}": t for n, t in model.parameters()}
    _restore_tensors(named, ck, ["m."])
    teacher = TeacherModel(cfg.scale, cfg.seed)
    _, _, _, holdout = _datasets(cfg)
    rows = []
    for p in holdout:
        out = model.forward(p.lr[None].astype(cfg.np_dtype())).data[0]
        rows.append((p.id, dataio.psnr(out, teacher(p.lr))))
    csv_path = os.path.join(out_dir, "eval.csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "psnr"])
        for rid, v in rows:
            w.writerow([rid, repr(v)])
    figures.render_eval([v for _, v in rows], os.path.join(out_dir, "eval.png"))
    _write_manifest(out_dir, "eval", cfg)
    mean = float(np.mean([v for _, v in rows]))
    print(f"psnr_mean {mean!r} over {len(rows)} held-out images")
    return 0


def _cmd_flops(args, cfg, out_dir):
    if args.arch:
        with open(args.arch) as fh:
            arch = derive.arch_from_text(fh.read())
    else:
        resume_path = args.resume or os.path.join(out_dir, "search.tnas")
        if not os.path.exists(resume_path):
            raise CliError(f"flops needs --arch or a checkpoint; not found at {resume_path}")
        ck = load_checkpoint(resume_path)
        if ck.phase == "search":
            _check_hash(ck, cfg, resume_path, config_mod.FINAL_ONLY_FIELDS)
            _, arch = _derived_from_search_ckpt(ck, cfg)
        elif ck.phase == "final":
            arch = derive.arch_from_text(ck.scalars["arch_text"])
        else:
            raise CheckpointError(f"{resume_path}: flops expects a search or final checkpoint")
    h = args.height or cfg.flops_h
    w = args.width or cfg.flops_w
    flops = derive.count_flops(arch, h, w)
    print(f"path {arch.path_string()}")
    print(f"params {derive.count_params(arch)}")
    print(f"flops {flops} at {h}x{w}")
    print(f"gflops {flops * 1e-9!r}")
    return 0


# ---------------------------------------------------------------------------


def _build_parser():
    p = argparse.ArgumentParser(prog="tnas", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="path to key = value config file")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", default="run", help="run directory (created if missing)")
        sp.add_argument("--resume", default=None, help="checkpoint to resume/start from")
        sp.add_argument("--lambda-order", type=float, default=None, dest="lambda_order")
        sp.add_argument("--lambda-flops", type=float, default=None, dest="lambda_flops")
        sp.add_argument("--train-mode", choices=["from_search", "from_scratch"], default=None,
                        dest="train_mode")
        sp.add_argument("--softmax-baseline", action="store_true", default=None,
                        dest="softmax_baseline")
        sp.add_argument("--stop-after", type=int, default=None, dest="stop_after",
                        help="stop the phase after this epoch (checkpoint kept; resume later)")
        if name == "eval":
            sp.add_argument("--pred", default=None, help="prediction image file (PGM)")
            sp.add_argument("--target", default=None, help="target image file (PGM)")
        if name in ("flops", "train"):
            sp.add_argument("--arch", default=None, help="architecture text file")
        if name == "flops":
            sp.add_argument("--height", type=int, default=None)
            sp.add_argument("--width", type=int, default=None)
        sp.set_defaults(fn=fn)
    return p


COMMANDS = {
    "gendata": _cmd_gendata,
    "pretrain": _cmd_pretrain,
    "search": _cmd_search,
    "train": _cmd_train,
    "derive": _cmd_derive,
    "eval": _cmd_eval,
    "flops": _cmd_flops,
}


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        raw = config_mod.load_config(args.config)
        overrides = {
            "seed": args.seed,
            "lambda_order": args.lambda_order,
            "lambda_flops": args.lambda_flops,
            "train_mode": args.train_mode,
            "softmax_baseline": args.softmax_baseline,
        }
        cfg = config_mod.resolve(raw, overrides)
        out_dir = args.out
        os.makedirs(out_dir, exist_ok=True)
        needs_lock = args.command in ("pretrain", "search", "train", "gendata")
        if needs_lock:
            with _RunLock(out_dir):
                return args.fn(args, cfg, out_dir)
        return args.fn(args, cfg, out_dir)
    except (ConfigError, CheckpointError, EngineError, CliError, dataio.DataError, FileNotFoundError) as e:
        print(f"error kind={type(e).__name__} msg={str(e)!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
