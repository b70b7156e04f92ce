"""Command-line front end: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage error, 2 data/format error. Outputs are
written only after every input has been read and validated, and each file
is written atomically (temp file + rename), so a failing command never
leaves a partial output behind.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

from . import __version__
from .bwr import TransformKey, load_key, protect, save_key
from .compressor import DeRConvParams, compress
from .config import Config, load_config
from .errors import DomainError, FormatError, SingularSystemError
from .fmap import encode_fmap, read_fmap, read_pgm
from .locator import RidgeRegressor, RoiPrediction, fit_locator, locate
from .metrics import cosine_score, read_scores_csv, roc_eer, write_roc_csv, write_scores_csv
from .scenario import SCENARIOS, run_scenario
from .synth import generate_dataset, load_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; route it to our exit code 1 instead
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _atomic(path, writer) -> None:
    """Run ``writer(tmp_path)`` then rename the result onto ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write(path, data: bytes | str) -> None:
    if isinstance(data, str):
        data = data.encode()
    _atomic(path, lambda tmp: Path(tmp).write_bytes(data))


def _config(args) -> Config:
    return load_config(args.config) if getattr(args, "config", None) else Config()


def _derconv(cfg: Config) -> DeRConvParams:
    return DeRConvParams.init(cfg.derconv.channels, cfg.derconv.init_seed)


def _manifest_path(p) -> Path:
    p = Path(p)
    return p / "manifest.json" if p.is_dir() else p


def cmd_gen(args) -> int:
    if args.identities < 1 or args.samples < 1:
        raise UsageError("--identities and --samples must be >= 1")
    rows = generate_dataset(args.identities, args.samples, args.seed, args.out, args.workers)
    print(f"wrote {len(rows)} images to {args.out}")
    return EXIT_OK


def cmd_train_locator(args) -> int:
    cfg = _config(args)
    samples = load_dataset(_manifest_path(args.manifest))
    model = fit_locator(samples, (cfg.roi.grid_h, cfg.roi.grid_w), cfg.roi.lam)
    _atomic(args.out, model.save)
    return EXIT_OK


def cmd_locate(args) -> int:
    model = RidgeRegressor.load(args.model)
    pred = locate(model, read_pgm(args.image))
    text = json.dumps(pred.to_json()) + "\n"
    if args.out:
        _atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_compress(args) -> int:
    cfg = _config(args)
    image = read_pgm(args.image)
    try:
        pred = RoiPrediction.from_json(json.loads(Path(args.pred).read_text()))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read prediction {args.pred}: {exc}") from exc
    fmap = compress(image, pred, _derconv(cfg), cfg.roi.out_h, cfg.roi.out_w)
    _atomic_write(args.out, encode_fmap(fmap))
    return EXIT_OK


def cmd_protect(args) -> int:
    key, params = load_key(args.key)
    fmap = read_fmap(args.inp)
    _atomic_write(args.out, encode_fmap(protect(fmap, key, params)))
    return EXIT_OK


def cmd_match(args) -> int:
    print(repr(cosine_score(read_fmap(args.a), read_fmap(args.b))))
    return EXIT_OK


def cmd_eval_roc(args) -> int:
    scores = read_scores_csv(args.scores)
    roc, eer, thr = roc_eer(scores)
    _atomic(args.out, lambda tmp: write_roc_csv(tmp, roc))
    print(json.dumps({"eer": eer, "threshold": thr}))
    return EXIT_OK


def cmd_keygen(args) -> int:
    cfg = _config(args)
    try:
        key = TransformKey.from_hex(args.key_hex)
    except ValueError as exc:
        raise UsageError(f"--key-hex: {exc}") from exc
    _atomic(args.out, lambda tmp: save_key(tmp, key, cfg.bwr))
    return EXIT_OK


def cmd_scenario(args) -> int:
    cfg = _config(args)
    dataset = args.dataset or cfg.paths.dataset
    if not dataset:
        raise UsageError("scenario needs --dataset or paths.dataset in the config")
    out = args.out or cfg.paths.out
    if not out:
        raise UsageError("scenario needs --out or paths.out in the config")
    samples = load_dataset(_manifest_path(dataset))
    model = RidgeRegressor.load(cfg.paths.models) if cfg.paths.models else None
    report, scores = run_scenario(
        samples, args.scenario, n_keys=cfg.eval.n_keys, master_seed=cfg.eval.master_seed,
        bwr_params=cfg.bwr, derconv=_derconv(cfg), out_hw=(cfg.roi.out_h, cfg.roi.out_w),
        model=model, grid=(cfg.roi.grid_h, cfg.roi.grid_w), lam=cfg.roi.lam,
        n_bins=cfg.eval.n_bins, workers=cfg.eval.workers, return_scores=True,
    )
    _atomic_write(out, report.to_json())
    if args.scores:
        _atomic(args.scores, lambda tmp: write_scores_csv(tmp, scores))
    print(f"{args.scenario}: eer={report.eer:.4f} dsys={report.dsys:.4f} "
          f"d_gp={report.d_gp:.3f} d_ip={report.d_ip:.3f} piamr={report.piamr:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="veinbwr", description="Cancelable finger-vein template pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen", help="render a synthetic dataset")
    p.add_argument("--identities", type=int, required=True)
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train-locator", help="fit the ridge ROI locator")
    p.add_argument("--manifest", required=True, help="manifest.json or its directory")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_locator)

    p = sub.add_parser("locate", help="predict ROI box and angle for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", help="write the prediction here instead of stdout")
    p.set_defaults(func=cmd_locate)

    p = sub.add_parser("compress", help="image + prediction -> compressed feature map")
    p.add_argument("--image", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("protect", help="apply the keyed BWR transform")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_protect)

    p = sub.add_parser("match", help="cosine score between two templates")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval-roc", help="ROC dump and EER from a scores CSV")
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_roc)

    p = sub.add_parser("keygen", help="write a key file for the configured BWR params")
    p.add_argument("--key-hex", required=True, help="16 hex digits")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("scenario", help="full threat-scenario evaluation")
    p.add_argument("--config")
    p.add_argument("--scenario", required=True, choices=SCENARIOS)
    p.add_argument("--dataset", help="overrides paths.dataset")
    p.add_argument("--out", help="report JSON (overrides paths.out)")
    p.add_argument("--scores", help="also dump labeled scores as CSV")
    p.set_defaults(func=cmd_scenario)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip() + "\nveinbwr: error: a subcommand is required")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, DomainError, SingularSystemError, OSError) as exc:
        print(f"veinbwr: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())
