"""Command-line front end.

Subcommands: train, generate, reconstruct, traverse, eval, wavelet, synth.
Common flags: --config (key=value file), --set KEY=VALUE overrides, --seed,
--out, --threads (1 = fully deterministic single-threaded math).

Exit codes: 0 ok, 2 configuration/format error, 3 numeric abort.

Heavy imports happen inside command handlers so --threads can pin the BLAS
thread pool via environment variables before numpy loads.
"""

from __future__ import annotations

import argparse
import os
import sys

from .errors import ConfigError, FormatError, NumericsError, WvaeError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _apply_thread_env(argv) -> None:
    value = None
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            value = argv[i + 1]
        elif arg.startswith("--threads="):
            value = arg.split("=", 1)[1]
    if value and value.isdigit() and int(value) >= 1:
        for var in _THREAD_VARS:
            os.environ[var] = value


def _common_flags(parser) -> None:
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any config key",
    )
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument(
        "--threads",
        type=int,
        default=0,
        help="math thread count (1 = fully deterministic)",
    )
    parser.add_argument(
        "--force", action="store_true", help="proceed despite config-hash mismatch"
    )


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wvae",
        description="Wavelet-space variational autoencoders: train, sample, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoints")
    _common_flags(p)
    p.add_argument("--data", help="dataset: folder of PGM/PPM or packed tensor file")
    p.add_argument("--model", help="model kind (vae, vae_c, wavelet_vae, ...)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample images from a checkpoint")
    _common_flags(p)
    p.add_argument("checkpoint")
    p.add_argument("-n", type=int, default=64, help="number of samples")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("reconstruct", help="auto-encode dataset images")
    _common_flags(p)
    p.add_argument("checkpoint")
    p.add_argument("--data", help="dataset to reconstruct (default: training data)")
    p.add_argument("-n", type=int, default=16)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("traverse", help="latent traversal grid")
    _common_flags(p)
    p.add_argument("checkpoint")
    p.add_argument("--image", help="PGM/PPM input; omitted = sample a prior latent")
    p.add_argument("--dims", default="all", help="latent dims: 'all' or comma list")
    p.add_argument("--low", type=float, default=-3.0)
    p.add_argument("--high", type=float, default=3.0)
    p.add_argument("--steps", type=int, default=10)
    p.set_defaults(func=cmd_traverse)

    p = sub.add_parser("eval", help="compute metrics for a checkpoint")
    _common_flags(p)
    p.add_argument("checkpoint")
    p.add_argument("--data", help="reference dataset (default: training data)")
    p.add_argument("--metrics", default="iqm,fid", help="comma list: iqm,fid,mi")
    p.add_argument("--trials", type=int, default=1, help="re-sampling trials")
    p.add_argument("-n", type=int, default=0, help="samples per trial (default 256)")
    p.add_argument(
        "--extractor",
        default="randconv",
        choices=("randconv", "pixels"),
        help="fid feature extractor",
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("wavelet", help="decompose an image / rebuild from a pyramid")
    _common_flags(p)
    p.add_argument("--image", help="PGM/PPM input (forward direction)")
    p.add_argument("--pyramid", help="pyramid file (inverse direction)")
    p.add_argument("-J", "--levels", type=int, default=3)
    p.add_argument("--direction", choices=("forward", "inverse"), default="forward")
    p.set_defaults(func=cmd_wavelet)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    _common_flags(p)
    p.add_argument("--count", type=int, default=512)
    p.add_argument("--extent", type=int, default=32)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--mix", default="0.5,0.25,0.25", help="gratings,blobs,mosaics weights")
    p.add_argument("--freq", type=float, default=6.0, help="grating cycles per image")
    p.add_argument("--noise", type=float, default=0.02)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    _apply_thread_env(argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericsError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except WvaeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


# -- shared helpers ------------------------------------------------------------------


def _load_config(args, extra: dict = None):
    from .config import RunConfig

    text = ""
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise ConfigError(f"config file {args.config} not found")
        with open(args.config) as fh:
            text = fh.read()
    overrides = {}
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if extra:
        overrides.update({k: v for k, v in extra.items() if v is not None})
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "out", None):
        overrides["out"] = args.out
    return RunConfig.from_sources(text, overrides)


def _load_model(args):
    """Checkpoint -> (model, config); warns on config-hash mismatch."""
    from .checkpoint import build_from_checkpoint, load_checkpoint

    ck = load_checkpoint(args.checkpoint)
    if getattr(args, "config", None):
        cfg_given = _load_config(args)
        if cfg_given.config_hash() != ck.config_hash and not args.force:
            raise ConfigError(
                "config hash mismatch between --config and checkpoint "
                f"({cfg_given.config_hash()} vs {ck.config_hash}); use --force"
            )
    model, cfg = build_from_checkpoint(ck)
    return model, cfg, ck


def _eval_seed(args, cfg) -> int:
    return args.seed if args.seed is not None else cfg.seed


def _outdir(args, default: str) -> str:
    out = args.out or default
    os.makedirs(out, exist_ok=True)
    return out


# -- train -----------------------------------------------------------------------------


def cmd_train(args) -> int:
    from . import data as data_mod

    cfg = _load_config(
        args,
        {
            "data": getattr(args, "data", None),
            "model": getattr(args, "model", None),
            "epochs": str(args.epochs) if getattr(args, "epochs", None) else None,
        },
    )
    if not cfg.data:
        raise ConfigError("train needs a dataset (--data or data= in the config)")
    ds = data_mod.load_dataset(cfg.data)
    if len(ds) < cfg.batch_size:
        raise ConfigError(
            f"dataset has {len(ds)} items, smaller than batch size {cfg.batch_size}"
        )
    cfg.channels = ds.channels
    cfg.image_size = ds.extent
    cfg.model_spec()  # validate architecture against the data shape

    outdir = cfg.out
    os.makedirs(outdir, exist_ok=True)
    lock = os.path.join(outdir, ".lock")
    try:
        os.close(os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY))
    except FileExistsError:
        raise ConfigError(f"lock file {lock} exists; is another run active?")
    try:
        with open(os.path.join(outdir, "config.txt"), "w") as fh:
            fh.write(cfg.echo_text())
        if cfg.is_gan():
            return _train_gan(cfg, ds, outdir)
        return _train_vae(cfg, ds, outdir, resume=getattr(args, "resume", None),
                          force=args.force)
    finally:
        if os.path.exists(lock):
            os.remove(lock)


def _checkpoint_paths(outdir: str, epoch: int):
    return (
        os.path.join(outdir, f"ckpt_epoch{epoch:05d}.wgc"),
        os.path.join(outdir, "ckpt_last.wgc"),
    )


def _save_training_checkpoint(cfg, model, optimizers, rngs, epoch, outdir):
    from .checkpoint import Checkpoint, save_checkpoint

    moments = {}
    ts = []
    for opt in optimizers:
        state = opt.state()
        ts.append(int(state.pop("t")))
        moments.update(state)
    ck = Checkpoint(
        kind=cfg.model,
        epoch=epoch,
        config_hash=cfg.config_hash(),
        config_text=cfg.to_text(),
        adam_t=tuple(ts),
        rng_states={name: rng.state() for name, rng in rngs.items()},
        params={name: t.data for name, t in model.params().items()},
        buffers=model.buffers(),
        moments=moments,
    )
    numbered, last = _checkpoint_paths(outdir, epoch)
    save_checkpoint(numbered, ck)
    save_checkpoint(last, ck)


def _train_vae(cfg, ds, outdir, resume=None, force=False) -> int:
    from . import data as data_mod
    from .checkpoint import load_checkpoint, restore_into
    from .models import build_model
    from .nn import Adam, LrSchedule
    from .rng import Rng

    rng = Rng(cfg.seed)
    model = build_model(cfg.model_spec(), rng.spawn(1))
    opt = Adam(model.params(), lr=cfg.lr)
    schedule = LrSchedule(cfg.lr, cfg.lr_halve_every)
    data_rng = rng.spawn(2)
    eps_rng = rng.spawn(3)
    start_epoch = 0
    log_path = os.path.join(outdir, "loss.tsv")

    if resume:
        ck = load_checkpoint(resume)
        if ck.config_hash != cfg.config_hash():
            if not force:
                raise ConfigError(
                    "resume checkpoint was written with a different config "
                    f"({ck.config_hash} vs {cfg.config_hash()}); use --force"
                )
            print("warning: resuming across config hashes", file=sys.stderr)
        restore_into(model, ck)
        opt.load_state({"t": ck.adam_t[0], **ck.moments})
        data_rng = Rng.from_state(ck.rng_states["data"])
        eps_rng = Rng.from_state(ck.rng_states["eps"])
        start_epoch = ck.epoch
    if start_epoch == 0 or not os.path.exists(log_path):
        with open(log_path, "w") as fh:
            fh.write("epoch\tlr\tll_recon\tdetail_recon\tkl\ttotal\n")

    steps_per_epoch = len(ds) // cfg.batch_size
    try:
        for epoch in range(start_epoch, cfg.epochs):
            opt.lr = schedule.rate(epoch)
            sums = [0.0, 0.0, 0.0, 0.0]
            for batch in data_mod.batches(
                ds, cfg.batch_size, rng=data_rng, shuffle=True, flip=cfg.augment_flip
            ):
                opt.zero_grad()
                terms = model.loss_terms(batch, eps_rng)
                terms.total.backward()
                opt.step()
                s = terms.scalars()
                for i, key in enumerate(("ll_recon", "detail_recon", "kl", "total")):
                    sums[i] += s[key]
            means = [s / steps_per_epoch for s in sums]
            line = (
                f"{epoch + 1}\t{opt.lr:.8g}\t{means[0]:.6g}\t{means[1]:.6g}"
                f"\t{means[2]:.6g}\t{means[3]:.6g}"
            )
            with open(log_path, "a") as fh:
                fh.write(line + "\n")
            print(line)
            done = epoch + 1
            if done % cfg.checkpoint_every == 0 or done == cfg.epochs:
                _save_training_checkpoint(
                    cfg, model, [opt], {"data": data_rng, "eps": eps_rng}, done, outdir
                )
    except NumericsError as exc:
        print(
            f"numeric abort at epoch {epoch + 1}: {exc} (last-good checkpoint kept)",
            file=sys.stderr,
        )
        return EXIT_NUMERIC
    return EXIT_OK


def _train_gan(cfg, ds, outdir) -> int:
    import numpy as np

    from . import data as data_mod
    from .gan import WaveletGan, _endless_batches, gan_step
    from .metrics import PixelExtractor, fid
    from .nn import Adam
    from .rng import Rng

    rng = Rng(cfg.seed)
    gan_cfg = cfg.gan_config()
    model = WaveletGan(cfg.model_spec(), gan_cfg, rng.spawn(1))
    opt_g = Adam(model.decoder.params(), lr=gan_cfg.lr_g, beta1=0.5)
    opt_d = Adam(model.disc.params(), lr=gan_cfg.lr_d, beta1=0.5)
    data_rng = rng.spawn(11)
    stream = _endless_batches(ds, cfg.batch_size, data_rng)
    noise = rng.spawn(12)
    eval_rng = rng.spawn(13)
    steps_per_epoch = len(ds) // cfg.batch_size
    log_path = os.path.join(outdir, "loss.tsv")
    with open(log_path, "w") as fh:
        fh.write("epoch\tlr\td_loss\tg_loss\tfid\n")
    extractor = PixelExtractor()
    fid_ref = ds.images[: min(len(ds), 256)]

    try:
        for epoch in range(cfg.epochs):
            d_sum = g_sum = 0.0
            for _ in range(steps_per_epoch):
                d_loss, g_loss = gan_step(
                    model, gan_cfg, opt_g, opt_d, stream, noise, cfg.batch_size
                )
                d_sum += d_loss
                g_sum += g_loss
            done = epoch + 1
            fid_text = ""
            if done % cfg.checkpoint_every == 0 or done == cfg.epochs:
                samples = np.clip(model.generate(eval_rng, min(64, len(fid_ref))), 0, 1)
                fid_text = f"{fid(fid_ref, samples, extractor).value:.6g}"
                from .data import tile_grid, write_pnm

                write_pnm(
                    os.path.join(outdir, f"samples_epoch{done:05d}.pgm"
                                 if samples.shape[1] == 1
                                 else f"samples_epoch{done:05d}.ppm"),
                    tile_grid(samples, 8),
                )
                _save_training_checkpoint(
                    cfg, model, [opt_g, opt_d],
                    {"data": data_rng, "noise": noise}, done, outdir,
                )
            line = (
                f"{done}\t{gan_cfg.lr_g:.8g}\t{d_sum / steps_per_epoch:.6g}"
                f"\t{g_sum / steps_per_epoch:.6g}\t{fid_text}"
            )
            with open(log_path, "a") as fh:
                fh.write(line + "\n")
            print(line)
    except NumericsError as exc:
        print(
            f"numeric abort at epoch {epoch + 1}: {exc} (last-good checkpoint kept)",
            file=sys.stderr,
        )
        return EXIT_NUMERIC
    return EXIT_OK


# -- sampling commands ---------------------------------------------------------------------


def cmd_generate(args) -> int:
    import numpy as np

    from .data import save_folder, tile_grid, write_pnm
    from .rng import Rng

    model, cfg, ck = _load_model(args)
    seed = _eval_seed(args, cfg)
    outdir = _outdir(args, "generated")
    images = np.clip(model.generate(Rng(seed).spawn(77), args.n), 0.0, 1.0)
    save_folder(outdir, images, prefix="sample")
    grid = tile_grid(images)
    ext = ".pgm" if grid.shape[0] == 1 else ".ppm"
    write_pnm(os.path.join(outdir, "grid" + ext), grid)
    print(f"wrote {args.n} samples and grid{ext} to {outdir}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    import numpy as np

    from .data import load_dataset, tile_grid, write_pnm
    from .rng import Rng

    model, cfg, ck = _load_model(args)
    if not hasattr(model, "reconstruct"):
        raise ConfigError(f"model kind {cfg.model} has no encoder to reconstruct with")
    ds = load_dataset(args.data or cfg.data)
    n = min(args.n, len(ds))
    originals = ds.images[:n]
    recon = np.clip(model.reconstruct(originals, Rng(_eval_seed(args, cfg)).spawn(88)), 0, 1)
    outdir = _outdir(args, "reconstructed")
    paired = np.concatenate([originals, recon])
    grid = tile_grid(paired, cols=n)
    ext = ".pgm" if grid.shape[0] == 1 else ".ppm"
    write_pnm(os.path.join(outdir, "pairs" + ext), grid)
    print(f"wrote original/reconstruction grid for {n} images to {outdir}")
    return EXIT_OK


def cmd_traverse(args) -> int:
    import numpy as np

    from .data import read_pnm, tile_grid, write_pnm
    from .rng import Rng

    model, cfg, ck = _load_model(args)
    if args.dims == "all":
        dims = list(range(cfg.latent))
    else:
        dims = [int(d) for d in args.dims.split(",") if d]
        for d in dims:
            if not 0 <= d < cfg.latent:
                raise ConfigError(f"latent dim {d} outside [0, {cfg.latent})")
    image = None
    if args.image:
        image = read_pnm(args.image)[None]
    else:
        print("no input image given: traversing around a prior latent sample")
    if image is None and not hasattr(model, "encode"):
        pass  # prior traversal needs no encoder
    elif image is not None and not hasattr(model, "encode"):
        raise ConfigError(f"model kind {cfg.model} has no encoder for image traversal")
    rng = Rng(_eval_seed(args, cfg)).spawn(99)
    rows = []
    for d in dims:
        rows.append(
            np.clip(model.traverse(image, d, rng, args.low, args.high, args.steps), 0, 1)
        )
    grid = tile_grid(np.concatenate(rows), cols=args.steps)
    outdir = _outdir(args, "traversal")
    ext = ".pgm" if grid.shape[0] == 1 else ".ppm"
    path = os.path.join(outdir, "traversal" + ext)
    write_pnm(path, grid)
    print(f"wrote {len(dims)}x{args.steps} traversal grid to {path}")
    return EXIT_OK


# -- evaluation -------------------------------------------------------------------------------


def cmd_eval(args) -> int:
    import numpy as np

    from .data import load_dataset
    from .metrics import (
        MetricReport,
        PixelExtractor,
        RandomConvExtractor,
        center_crop_pow2,
        fid,
        iqm,
        index_code_mi,
    )
    from .rng import Rng

    model, cfg, ck = _load_model(args)
    ds = load_dataset(args.data or cfg.data)
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    for name in wanted:
        if name not in ("iqm", "fid", "mi"):
            raise ConfigError(f"unknown metric {name!r} (choose iqm, fid, mi)")
    has_encoder = hasattr(model, "encode")
    n = args.n or min(len(ds), 256)
    extractor = RandomConvExtractor() if args.extractor == "randconv" else PixelExtractor()
    seed = _eval_seed(args, cfg)

    def prep(images):
        if images.shape[-1] != images.shape[-2] or images.shape[-1] & (images.shape[-1] - 1):
            return center_crop_pow2(images)
        return images

    real = ds.images[:n]
    samples: dict = {name: [] for name in
                     ("iqm_generated", "iqm_reconstructed", "fid_generated",
                      "fid_reconstructed", "mi")}
    for trial in range(max(1, args.trials)):
        rng = Rng(seed).spawn(1000 + trial)
        generated = np.clip(model.generate(rng, n), 0.0, 1.0)
        recon = None
        if has_encoder:
            recon = np.clip(model.reconstruct(real, rng), 0.0, 1.0)
        if "iqm" in wanted:
            samples["iqm_generated"].append(iqm(prep(generated), cfg.iqm_divisor))
            if recon is not None:
                samples["iqm_reconstructed"].append(iqm(prep(recon), cfg.iqm_divisor))
        if "fid" in wanted:
            samples["fid_generated"].append(fid(real, generated, extractor).value)
            if recon is not None:
                samples["fid_reconstructed"].append(fid(real, recon, extractor).value)
        if "mi" in wanted and has_encoder:
            samples["mi"].append(
                index_code_mi(model.posterior_fn(), ds.images, rng, subsample=2048)
            )

    reports = []
    if "iqm" in wanted:
        reports.append(
            MetricReport("iqm_dataset", iqm(prep(ds.images), cfg.iqm_divisor),
                         n_real=len(ds), extractor="-", config_hash=ck.config_hash)
        )
    for name, values in samples.items():
        if not values:
            continue
        reports.append(
            MetricReport(
                name,
                float(np.mean(values)),
                n_real=n,
                n_gen=n,
                extractor=extractor.name if name.startswith("fid") else "-",
                config_hash=ck.config_hash,
                std=float(np.std(values)) if len(values) > 1 else float("nan"),
            )
        )

    outdir = _outdir(args, "eval")
    tsv_path = os.path.join(outdir, "report.tsv")
    txt_path = os.path.join(outdir, "report.txt")
    with open(tsv_path, "w") as fh:
        fh.write(MetricReport.tsv_header() + "\n")
        for report in reports:
            fh.write(report.tsv_line() + "\n")
    with open(txt_path, "w") as fh:
        for report in reports:
            fh.write(report.text_block() + "\n")
    print(MetricReport.tsv_header())
    for report in reports:
        print(report.tsv_line())
    for report in reports:
        print(report.text_block())
    return EXIT_OK


# -- wavelet and synthesis utilities ------------------------------------------------------------


def cmd_wavelet(args) -> int:
    import numpy as np

    from . import wavelet as wv
    from .data import read_pnm, write_pnm
    from .tensor import Tensor

    outdir = _outdir(args, ".")
    if args.direction == "forward":
        if not args.image:
            raise ConfigError("forward direction needs --image")
        image = read_pnm(args.image)
        pyramid = wv.decompose(Tensor(image[None]), args.levels)
        pyr_path = os.path.join(outdir, "pyramid.wvp")
        wv.save_pyramid(pyr_path, pyramid)
        tiled = wv.tile_pyramid(pyramid)
        ext = ".pgm" if tiled.shape[0] == 1 else ".ppm"
        tile_path = os.path.join(outdir, "coefficients" + ext)
        write_pnm(tile_path, tiled)
        print(f"wrote {pyr_path} and {tile_path}")
    else:
        if not args.pyramid:
            raise ConfigError("inverse direction needs --pyramid")
        pyramid = wv.load_pyramid(args.pyramid)
        image = wv.reconstruct(pyramid).data[0]
        ext = ".pgm" if image.shape[0] == 1 else ".ppm"
        path = os.path.join(outdir, "reconstructed" + ext)
        write_pnm(path, np.clip(image, 0.0, 1.0))
        print(f"wrote {path}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .data import SynthSpec, save_packed, synth

    try:
        mix = tuple(float(part) for part in args.mix.split(","))
    except ValueError:
        raise ConfigError(f"cannot parse --mix {args.mix!r}")
    if len(mix) != 3:
        raise ConfigError("--mix needs exactly three weights (gratings,blobs,mosaics)")
    spec = SynthSpec(
        count=args.count,
        extent=args.extent,
        channels=args.channels,
        seed=args.seed or 0,
        mix=mix,
        freq=args.freq,
        noise=args.noise,
    )
    ds = synth(spec)
    outdir = _outdir(args, "synth")
    path = os.path.join(outdir, "corpus.wgt")
    save_packed(path, ds)
    print(f"wrote {path} ({spec.count} images, fingerprint {ds.fingerprint()})")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
