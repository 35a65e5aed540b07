"""Command-line front end.

    bitglow train    --arch iris_b --seed 7 --out m.model
    bitglow quantize --model m.model --out m.qmodel
    bitglow layout   --model m.qmodel --out flash.bin
    bitglow sweep    --model m.model --spots 1 --from 0 --to 1240 --step 40 --out sweep.csv
    bitglow bsca     --model m.model --budget 20 --batch 100 [--line 1,7] --out attack/
    bitglow extract  --model m.model --probes 500 --seed 0 --out extraction/
    bitglow report   --from sweep.csv

Output columns
  sweep.csv        x_um, bitline ('a|b' for two spots, 'none' off-array),
                   accuracy (fraction of the evaluation set), faulted_bits
                   (bit-sets that changed a loaded byte, per inference)
  bsca table.csv   column, bit, bit_line, flips, final_accuracy, final_loss
  bsca fliplog.csv weight_id, layer, row, col, offset, bit, byte_before,
                   byte_after, loss_before, loss_after, accuracy_after, ...
  bsca replay.csv  flips, accuracy
  extraction.csv   weight_id, true_msb, guess, correct

Exit status: 0 on success, 2 on usage errors (bad flags, missing inputs),
1 on runtime failures. Errors are printed to stderr as one JSON object with
a ``category`` field. Outputs are written via temp files and renamed, only
once all results are computed. BITGLOW_THREADS caps campaign parallelism.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import data as D
from . import fixtures as F
from .bsca import REFERENCE_TARGETS, BscaConfig, bsca_line, bsca_search, draw_batch, flip_log_rows, replay_on_simulator
from .extract import extract_msbs, random_probes
from .faultsim import TriggerSet, dual_spot_sweep, positions_um, sweep
from .flash import Geometry, layout
from .nn import FloatModel, TrainConfig, TrainingError, model_from_dict, model_to_dict
from .quant import QuantizedModel, q_accuracy, qmodel_from_dict, qmodel_to_dict, quantize

log = logging.getLogger("bitglow")


class UsageError(Exception):
    pass


class RunError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


# ------------------------------------------------------------------ io helpers

def write_atomic(path, payload) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload.encode() if isinstance(payload, str) else payload)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_all(files: dict) -> None:
    for path, payload in files.items():
        write_atomic(path, payload)


def _json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o)}")


def _rows_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


# ------------------------------------------------------------------ model/data

def _read_doc(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"model file not found: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise RunError("model-format", f"{path}: {exc}") from None


def _dataset_for(meta: dict):
    kind = meta.get("dataset")
    if kind is None:
        raise RunError("model-format", "model carries no dataset reference")
    if kind == "iris":
        return D.load_iris(meta.get("split_seed", 0))
    ds, _, _ = F.load_dataset("mnist", mnist_dir=meta.get("mnist_dir"))
    if kind == "mnist-pca50":
        if "pca" not in meta:
            raise RunError("model-format", "PCA model lacks its stored transform")
        pca = D.PcaTransform.from_dict(meta["pca"])
        ds = D.Dataset(pca.apply(ds.x_train), ds.y_train, pca.apply(ds.x_test), ds.y_test,
                       ds.n_classes, name=kind)
    return ds


def load_any_model(path) -> tuple[QuantizedModel, D.Dataset]:
    """Quantised model plus its dataset, from either a float or a quantised file."""
    doc = _read_doc(path)
    fmt = doc.get("format", "")
    if fmt.startswith("bitglow-float"):
        model = model_from_dict(doc)
        ds = _dataset_for(model.metadata)
        return quantize(model, ds.x_train), ds
    if fmt.startswith("bitglow-q7"):
        q = qmodel_from_dict(doc)
        return q, _dataset_for(q.metadata)
    raise RunError("model-format", f"{path}: unknown model format {fmt!r}")


def _eval_set(ds: D.Dataset, n: int, seed: int):
    return ds.eval_subset(n, seed) if n > 0 else (ds.x_test, ds.y_test)


# ------------------------------------------------------------------ commands

def cmd_train(a) -> str:
    spec = F.ARCHS[a.arch]
    overrides = {"seed": a.seed}
    if a.epochs is not None:
        overrides["epochs"] = a.epochs
    cfg = TrainConfig(**{**spec.config.__dict__, **overrides,
                         "min_accuracy": None if a.no_floor else spec.floor})
    ds, pca, source = F.load_dataset(spec.dataset, mnist_dir=a.mnist_dir)
    from .nn import train
    try:
        model = train(cfg, ds)
    except TrainingError as exc:
        raise RunError("training", f"{exc} ({json.dumps(exc.report)})") from None
    q = quantize(model, ds.x_train)
    model.metadata.update(
        arch=a.arch, dataset=spec.dataset, data_source=source, split_seed=0,
        mnist_dir=str(a.mnist_dir) if a.mnist_dir else None,
        quantized_test_accuracy=q_accuracy(q, ds.x_test, ds.y_test),
        reference_accuracy=spec.reference_accuracy, floor=spec.floor,
    )
    if pca is not None:
        model.metadata["pca"] = pca.to_dict()
    write_atomic(a.out, json.dumps(model_to_dict(model)))
    m = model.metadata
    return (f"train: {a.arch} seed {a.seed} test accuracy {m['test_accuracy']:.4f} "
            f"(quantized {m['quantized_test_accuracy']:.4f}) -> {a.out}")


def cmd_quantize(a) -> str:
    q, ds = load_any_model(a.model)
    files = {a.out: json.dumps(qmodel_to_dict(q))}
    if a.bin:
        files[a.bin] = layout(q).data
    write_all(files)
    acc = q_accuracy(q, ds.x_test, ds.y_test)
    return f"quantize: {q.n_weights} weights, test accuracy {acc:.4f} -> {a.out}"


def cmd_layout(a) -> str:
    q, _ = load_any_model(a.model)
    image = layout(q, base_address=a.base_address)
    files = {a.out: image.data}
    if a.sidecar:
        lines = ["weight_id,layer,row,col,offset"]
        lines += [",".join(map(str, r)) for r in image.sidecar_rows()]
        files[a.sidecar] = "\n".join(lines) + "\n"
    write_all(files)
    return f"layout: {image.n_weights} bytes in {image.n_words} words -> {a.out}"


def cmd_sweep(a) -> str:
    q, ds = load_any_model(a.model)
    image = layout(q)
    geo = Geometry(a.origin, a.pitch)
    x, y = _eval_set(ds, a.eval, a.seed)
    start = a.start if a.start is not None else geo.bitline_to_x(0)
    stop = a.stop if a.stop is not None else geo.bitline_to_x(31)
    step = a.step if a.step is not None else geo.pitch
    pos = positions_um(start, stop, step)
    if a.spots == 1:
        res = sweep(q, image, pos, x, y, TriggerSet(), a.width, geo)
    else:
        res = dual_spot_sweep(q, image, pos, x, y, TriggerSet(), a.width, a.offset, geo)
    res.metadata.update(model=str(a.model), eval_samples=len(y), pitch=a.pitch, origin=a.origin)
    out = Path(a.out)
    write_all({out: res.to_csv(), out.with_suffix(".summary.json"): _json(res.summary())})
    w = res.worst()
    return (f"sweep: {len(res.rows)} positions, baseline {res.baseline_accuracy:.3f}, "
            f"worst {w.accuracy:.3f} at {w.x_um:g} um ({w.faulted_bits} bit-sets) -> {out}")


def _parse_line(text):
    try:
        m, k = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("line must be 'column,bit'") from None
    if not (0 <= m < 4 and 0 <= k < 8):
        raise argparse.ArgumentTypeError("column in 0..3, bit in 0..7")
    return m, k


def cmd_bsca(a) -> str:
    q, ds = load_any_model(a.model)
    image = layout(q)
    cfg = BscaConfig(budget=a.budget, batch_size=a.batch, candidate_cap=a.cap, seed=a.seed,
                     line=a.line)
    xb, yb = draw_batch(ds.x_train, ds.y_train, cfg.batch_size, cfg.seed)
    xe, ye = _eval_set(ds, a.eval, a.seed)
    if cfg.line is None:
        rep = bsca_search(q, image, cfg, xb, yb, xe, ye)
        table, res = rep.table, rep.winner
    else:
        res = bsca_line(q, image, *cfg.line, cfg, xb, yb, xe, ye)
        table = None
    curve = replay_on_simulator(res.log, q, image, res.column, res.bit, xe, ye)
    out = Path(a.out)
    report = {
        "model": str(a.model),
        "budget": cfg.budget,
        "batch": cfg.batch_size,
        "candidate_cap": cfg.candidate_cap,
        "seed": cfg.seed,
        "eval_samples": len(ye),
        "winning_line": {"column": res.column, "bit": res.bit, "bit_line": res.bit_line},
        "baseline_accuracy": res.baseline_accuracy,
        "final_accuracy": res.final_accuracy,
        "notice": res.notice,
        "line_table": table,
        "flip_log": flip_log_rows(res),
        "replay_matches_attack": [acc for _, acc in curve] == res.trace(),
        "reference": REFERENCE_TARGETS,
    }
    files = {
        out / "report.json": _json(report),
        out / "fliplog.csv": _rows_csv(flip_log_rows(res)),
        out / "replay.csv": _rows_csv([{"flips": n, "accuracy": f"{acc:.6f}"} for n, acc in curve]),
    }
    if table is not None:
        files[out / "table.csv"] = _rows_csv(table)
    write_all(files)
    return (f"bsca: line (column {res.column}, bit {res.bit}), {len(res.log)} bit-sets, "
            f"accuracy {res.baseline_accuracy:.3f} -> {res.final_accuracy:.3f} -> {out}")


def cmd_extract(a) -> str:
    q, _ = load_any_model(a.model)
    image = layout(q)
    probes = random_probes(q, a.probes, a.seed)
    ids = None
    if a.subsample < 1.0:
        rng = np.random.default_rng(a.seed)
        n = max(1, int(round(a.subsample * image.n_weights)))
        ids = np.sort(rng.choice(image.n_weights, n, replace=False))
    rep = extract_msbs(q, image, probes, compare=a.compare, method=a.method, weight_ids=ids)
    rep.extra.update(model=str(a.model), seed=a.seed, compare=a.compare,
                     subsample=a.subsample)
    out = Path(a.out)
    write_all({out / "extraction.json": _json(rep.summary()), out / "extraction.csv": rep.to_csv()})
    return (f"extract: {len(rep.guesses)} weights, {a.probes} probes, recovered "
            f"{rep.recovered_fraction:.4f}, wrong zero-guesses {rep.incorrect_zero_guesses} -> {out}")


def summarize_sweep_csv(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input not found: {path}")
    with open(p, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows or "accuracy" not in rows[0]:
        raise RunError("input-format", f"{path}: not a sweep CSV")
    accs = [float(r["accuracy"]) for r in rows]
    i = int(np.argmin(accs))
    return {
        "source": str(path),
        "positions": len(rows),
        "worst_row": i,
        "worst_x_um": float(rows[i]["x_um"]),
        "worst_bitline": rows[i]["bitline"],
        "worst_accuracy": accs[i],
        "worst_faulted_bits": int(rows[i]["faulted_bits"]),
        "max_faulted_bits": max(int(r["faulted_bits"]) for r in rows),
        "mean_accuracy": float(np.mean(accs)),
    }


def cmd_report(a) -> str:
    s = summarize_sweep_csv(a.source)
    if a.out:
        write_atomic(a.out, _json(s))
    return (f"report: worst accuracy {s['worst_accuracy']:.3f} at {s['worst_x_um']:g} um "
            f"(bit line {s['worst_bitline']}), {s['positions']} positions")


# ------------------------------------------------------------------ parser

REQUIRED = {
    "train": ["arch", "out"],
    "quantize": ["model", "out"],
    "layout": ["model", "out"],
    "sweep": ["model", "out"],
    "bsca": ["model", "out"],
    "extract": ["model", "out"],
    "report": ["source"],
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bitglow", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", help="JSON file of flag defaults; explicit flags win")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        sp.add_argument("--seed", type=int, default=0)
        return sp

    sp = add("train", cmd_train, "train a fixture model")
    sp.add_argument("--arch", choices=sorted(F.ARCHS))
    sp.add_argument("--out")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--mnist-dir")
    sp.add_argument("--no-floor", action="store_true", help="do not fail below the accuracy floor")

    sp = add("quantize", cmd_quantize, "quantise a float model")
    sp.add_argument("--model")
    sp.add_argument("--out")
    sp.add_argument("--bin", help="also write the raw little-endian weight image")

    sp = add("layout", cmd_layout, "dump the Flash image")
    sp.add_argument("--model")
    sp.add_argument("--out")
    sp.add_argument("--sidecar", help="CSV map weight_id,layer,row,col,offset")
    sp.add_argument("--base-address", type=lambda s: int(s, 0), default=0)

    sp = add("sweep", cmd_sweep, "laser position sweep")
    sp.add_argument("--model")
    sp.add_argument("--spots", type=int, choices=(1, 2), default=1)
    sp.add_argument("--from", dest="start", type=float)
    sp.add_argument("--to", dest="stop", type=float)
    sp.add_argument("--step", type=float)
    sp.add_argument("--width", type=int, choices=(1, 2), default=1)
    sp.add_argument("--offset", type=int, default=16, help="second spot offset in bit lines")
    sp.add_argument("--pitch", type=float, default=40.0, help="bit line pitch (um)")
    sp.add_argument("--origin", type=float, default=0.0, help="X of bit line 0 (um)")
    sp.add_argument("--eval", type=int, default=0, help="evaluation subset size (0 = full test split)")
    sp.add_argument("--out")

    sp = add("bsca", cmd_bsca, "bit-set constrained attack")
    sp.add_argument("--model")
    sp.add_argument("--budget", type=int, default=20)
    sp.add_argument("--batch", type=int, default=100)
    sp.add_argument("--cap", type=int, default=128, help="candidates measured per iteration")
    sp.add_argument("--line", type=_parse_line, help="column,bit (default: search all 32 lines)")
    sp.add_argument("--eval", type=int, default=100)
    sp.add_argument("--out")

    sp = add("extract", cmd_extract, "MSB extraction")
    sp.add_argument("--model")
    sp.add_argument("--probes", type=int, default=500)
    sp.add_argument("--compare", choices=("logits", "label"), default="logits")
    sp.add_argument("--method", choices=("fast", "direct"), default="fast")
    sp.add_argument("--subsample", type=float, default=1.0)
    sp.add_argument("--out")

    sp = add("report", cmd_report, "summarise a sweep CSV")
    sp.add_argument("--from", dest="source")
    sp.add_argument("--out")
    return p


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        try:
            cfg = json.loads(Path(known.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config: {exc}")
        for action in parser._subparsers._group_actions:
            for sp in action.choices.values():
                sp.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
    args = parser.parse_args(argv)
    missing = [f"--{k}" for k in REQUIRED[args.command] if getattr(args, k, None) is None]
    if missing:
        parser.error(f"{args.command}: missing {', '.join(missing)}")
    if isinstance(getattr(args, "line", None), str):
        args.line = _parse_line(args.line)
    return args


def _fail(category: str, message: str, code: int) -> int:
    print(json.dumps({"status": "error", "category": category, "message": message}),
          file=sys.stderr)
    return code


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        print(args.func(args))
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    except RunError as exc:
        return _fail(exc.category, str(exc), 1)
    except (OSError, ValueError) as exc:
        return _fail("runtime", f"{type(exc).__name__}: {exc}", 1)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
