"""Command-line front end.

Subcommands: compile (emit per-core programs), sim (cycle-level run with an
energy report), train (training curves on any backend), sweep (slice config x
resolution period grid to CSV), asm/disasm (assembly text <-> 64-bit words),
report (flatten a saved report to tidy CSV).

Every subcommand that writes into an output directory also writes a
manifest.json recording the resolved configuration, the seed, and the package
version, so the artifacts can be regenerated byte for byte.
"""

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from . import __version__
from .compiler import build_graph, partition, schedule
from .costmodel import CostModel
from .errors import ValidationError, XbarError
from .isa import assemble, decode_program, disassemble, encode_program
from .lower import lower
from .machine import COST_PATHS
from .model import ModelSpec
from .slicing import SliceConfig
from .workloads import BACKENDS, TrainRun, make_model, train

MODEL_NAMES = ("mlp2", "mlp4", "mlp128", "cnn4")


# --------------------------------------------------------------- arg helpers

def _seed_default():
    env = os.environ.get("PANTHER_SEED", "")
    try:
        return int(env) if env else 0
    except ValueError:
        raise ValidationError("PANTHER_SEED must be an integer, got %r" % env)


def load_model(text):
    """Registry name or path to a model description JSON."""
    if os.path.exists(text):
        with open(text) as fh:
            return ModelSpec.from_json(fh.read())
    if text.strip().lower() in MODEL_NAMES:
        return make_model(text)
    raise ValidationError(
        "model %r is neither a file nor one of %s" % (text, ", ".join(MODEL_NAMES)))


def load_slices(text):
    """Preset name or path to a slice config JSON."""
    if os.path.exists(text):
        with open(text) as fh:
            return SliceConfig.from_json(fh.read())
    return SliceConfig.preset(text)


def load_cost(path):
    if path is None:
        return None
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except ValueError as exc:
            raise ValidationError("bad cost file %s: %s" % (path, exc))
    return CostModel(**doc)


def parse_variant(text):
    raw = str(text).strip().lower()
    if raw.startswith("v"):
        raw = raw[1:]
    if raw not in ("1", "2", "3"):
        raise ValidationError("variant must be v1, v2 or v3, got %r" % text)
    return int(raw)


def parse_slice_list(text):
    """Comma list of presets/files; short bare integers extend a uniform:
    prefix, so 'uniform:3,4,5' means uniform:3 uniform:4 uniform:5. Longer
    digit runs stay standalone names (the digit-string presets)."""
    names = []
    prefix = None
    for token in str(text).split(","):
        token = token.strip()
        if not token:
            continue
        if token.isdigit() and len(token) <= 2 and prefix:
            token = prefix + token
        elif ":" in token:
            prefix = token.rsplit(":", 1)[0] + ":"
        else:
            prefix = None
        names.append(token)
    if not names:
        raise ValidationError("empty slice list")
    return names


def parse_int_list(text):
    try:
        return [int(tok) for tok in str(text).split(",") if tok.strip()]
    except ValueError:
        raise ValidationError("bad integer list %r" % text)


def write_manifest(outdir, command, config, seed):
    doc = {"version": __version__, "command": command, "seed": seed,
           "config": config}
    path = os.path.join(outdir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _json_out(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _model_doc(model):
    return json.loads(model.to_json())


def _slices_doc(cfg):
    return json.loads(cfg.to_json())


# --------------------------------------------------------------- subcommands

def cmd_compile(args):
    model = load_model(args.model)
    cfg = load_slices(args.slices)
    run = TrainRun(model, algo=args.algo, steps=1, lr_shift=args.lr_shift,
                   slices=cfg, variant=parse_variant(args.variant),
                   seed=args.seed)
    pm = partition(model)
    graph = build_graph(pm, run.batch, run.variant,
                        forward_only=args.forward_only)
    kernel = lower(graph, schedule(graph), lr_shift=run.lr_shift).validate()
    os.makedirs(args.out, exist_ok=True)
    kernel.save(args.out)
    write_manifest(args.out, "compile",
                   {"model": _model_doc(model), "slices": _slices_doc(cfg),
                    "algo": args.algo, "variant": run.variant,
                    "lr_shift": run.lr_shift,
                    "forward_only": bool(args.forward_only)},
                   args.seed)
    print("compiled %d cores, %d instructions -> %s"
          % (len(kernel.cores), kernel.total_instructions(), args.out))
    return 0


def _run_config(run, backend, extra=None):
    doc = run.to_dict()
    doc["backend"] = backend
    doc["model"] = _model_doc(run.model)
    doc["slices"] = _slices_doc(run.slices)
    doc.update(extra or {})
    return doc


def cmd_sim(args):
    model = load_model(args.model)
    cfg = load_slices(args.slices)
    algo = "minibatch:%d" % args.batch if args.batch else args.algo
    run = TrainRun(model, algo=algo, steps=args.steps, lr_shift=args.lr_shift,
                   seed=args.seed, slices=cfg, crs_period=args.crs,
                   variant=parse_variant(args.variant),
                   cost_path=args.baseline, cost=load_cost(args.cost))
    result = train(run, "compiled_simulator")
    doc = result.to_dict()
    total = doc["total_energy_pj"]
    print("baseline=%s steps=%d cycles=%d total_energy_pj=%d accuracy=%.4f"
          % (args.baseline, args.steps, doc["cycles"], total,
             result.final_accuracy))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _json_out(os.path.join(args.out, "report.json"), doc)
        write_manifest(args.out, "sim",
                       _run_config(run, "compiled_simulator",
                                   {"baseline": args.baseline,
                                    "cost_file": args.cost}),
                       args.seed)
    return 0


def cmd_train(args):
    model = load_model(args.model)
    cfg = load_slices(args.slices)
    run = TrainRun(model, algo=args.algo, steps=args.steps,
                   lr_shift=args.lr_shift, seed=args.seed, slices=cfg,
                   crs_period=args.crs, variant=parse_variant(args.variant),
                   eval_every=args.eval_every, init_scale=args.init_scale)
    result = train(run, args.backend)
    print("backend=%s steps=%d final_accuracy=%.4f final_loss=%.4f"
          % (args.backend, args.steps, result.final_accuracy,
             float(result.loss[-1])))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _json_out(os.path.join(args.out, "result.json"), result.to_dict())
        write_manifest(args.out, "train", _run_config(run, args.backend),
                       args.seed)
    return 0


def _sweep_cell(payload):
    model_doc, slices_name, crs, knobs = payload
    run = TrainRun(ModelSpec.from_json(model_doc), algo=knobs["algo"],
                   steps=knobs["steps"], lr_shift=knobs["lr_shift"],
                   seed=knobs["seed"], slices=load_slices(slices_name),
                   crs_period=crs, init_scale=knobs["init_scale"])
    r = train(run, knobs["backend"])
    return {"slices": slices_name, "crs_period": crs,
            "final_accuracy": round(r.final_accuracy, 6),
            "final_loss": round(float(r.loss[-1]), 6),
            "lsb_saturation_mean": round(float(r.saturation.mean()), 6)}

SWEEP_COLUMNS = ("slices", "crs_period", "final_accuracy", "final_loss",
                 "lsb_saturation_mean")


def cmd_sweep(args):
    model = load_model(args.model)
    slice_names = parse_slice_list(args.slices)
    for name in slice_names:
        load_slices(name)
    periods = parse_int_list(args.crs)
    knobs = {"algo": args.algo, "steps": args.steps,
             "lr_shift": args.lr_shift, "seed": args.seed,
             "init_scale": args.init_scale, "backend": args.backend}
    grid = [(model.to_json(), s, p, knobs)
            for s in slice_names for p in periods]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_cell, grid))
    else:
        rows = [_sweep_cell(cell) for cell in grid]
    rows.sort(key=lambda r: (slice_names.index(r["slices"]), r["crs_period"]))

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "sweep.csv"), "w") as fh:
            fh.write(buf.getvalue())
        write_manifest(args.out, "sweep",
                       {"model": _model_doc(model), "slices": slice_names,
                        "crs": periods, **knobs}, args.seed)
        print("wrote %d rows -> %s" % (len(rows),
                                       os.path.join(args.out, "sweep.csv")))
    else:
        sys.stdout.write(buf.getvalue())
    return 0


def _read_text(path):
    if path in (None, "-"):
        return sys.stdin.read()
    with open(path) as fh:
        return fh.read()


def cmd_asm(args):
    program = assemble(_read_text(args.input))
    blob = encode_program(program)
    words = ["%016x" % int.from_bytes(blob[i:i + 8], "little")
             for i in range(0, len(blob), 8)]
    text = "\n".join(words) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_disasm(args):
    if args.input not in (None, "-") and args.input.endswith(".bin"):
        with open(args.input, "rb") as fh:
            blob = fh.read()
    else:
        tokens = _read_text(args.input).split()
        try:
            blob = b"".join(int(tok, 16).to_bytes(8, "little")
                            for tok in tokens)
        except (ValueError, OverflowError):
            raise ValidationError("disasm input must be 64-bit hex words")
    text = disassemble(decode_program(blob))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_report(args):
    with open(args.input) as fh:
        try:
            doc = json.load(fh)
        except ValueError as exc:
            raise ValidationError("bad report file: %s" % exc)
    rows = []
    if "energy_by_layer_pj" in doc:
        header = ("layer", "category", "energy_pj")
        for layer, cats in sorted(doc["energy_by_layer_pj"].items(),
                                  key=lambda kv: int(kv[0])):
            for cat, val in sorted(cats.items()):
                rows.append((layer, cat, val))
    elif "loss" in doc:
        header = ("step", "loss", "lsb_saturation")
        sat = doc.get("saturation", [])
        for i, val in enumerate(doc["loss"]):
            rows.append((i, val, sat[i] if i < len(sat) else ""))
    else:
        raise ValidationError(
            "report input has neither energy_by_layer_pj nor loss")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return 0


# --------------------------------------------------------------------- main

def build_parser():
    top = argparse.ArgumentParser(
        prog="xbarsim",
        description="crossbar training accelerator: compiler and simulator")
    top.add_argument("--version", action="version", version=__version__)
    sub = top.add_subparsers(dest="command", required=True)

    def common(p, steps=None):
        p.add_argument("--model", required=True,
                       help="registry name (%s) or model JSON file"
                            % "/".join(MODEL_NAMES))
        p.add_argument("--algo", default="sgd", help="sgd or minibatch:B")
        p.add_argument("--variant", default="v1", help="v1, v2 or v3")
        p.add_argument("--slices", default="44466555",
                       help="preset name or slice config JSON file")
        p.add_argument("--seed", type=int, default=_seed_default(),
                       help="RNG seed (default: $PANTHER_SEED or 0)")
        p.add_argument("--lr-shift", type=int, default=6,
                       help="learning-rate exponent (right shift)")
        if steps is not None:
            p.add_argument("--steps", type=int, default=steps)
            p.add_argument("--crs", type=int, default=1024,
                           help="carry resolution period in processed inputs")

    p = sub.add_parser("compile", help="emit per-core programs for one step")
    common(p)
    p.add_argument("--forward-only", action="store_true",
                   help="compile the inference kernel only")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_compile)

    p = sub.add_parser("sim", help="cycle-level run with an energy report")
    common(p, steps=4)
    p.add_argument("--batch", type=int, default=0,
                   help="shorthand for --algo minibatch:B")
    p.add_argument("--baseline", default="panther", choices=COST_PATHS)
    p.add_argument("--cost", help="JSON file of cost model overrides")
    p.add_argument("-o", "--out", help="output directory for report.json")
    p.set_defaults(fn=cmd_sim)

    p = sub.add_parser("train", help="training curves on a chosen backend")
    common(p, steps=500)
    p.add_argument("--backend", default="functional_sliced", choices=BACKENDS)
    p.add_argument("--init-scale", type=float, default=4.0)
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("-o", "--out", help="output directory for result.json")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sweep",
                       help="slice config x resolution period grid to CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--slices", required=True,
                   help="comma list, e.g. uniform:3,4,5,6 or 44466555,fig3f62")
    p.add_argument("--crs", required=True, help="comma list of periods")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--algo", default="sgd")
    p.add_argument("--backend", default="functional_sliced", choices=BACKENDS)
    p.add_argument("--lr-shift", type=int, default=6)
    p.add_argument("--init-scale", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=_seed_default())
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel workers for grid cells")
    p.add_argument("-o", "--out", help="output directory for sweep.csv")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("asm", help="assembly text to 64-bit hex words")
    p.add_argument("input", nargs="?", help="source file (default stdin)")
    p.add_argument("-o", "--out")
    p.set_defaults(fn=cmd_asm)

    p = sub.add_parser("disasm", help="hex words or .bin back to assembly")
    p.add_argument("input", nargs="?", help="hex/.bin file (default stdin)")
    p.add_argument("-o", "--out")
    p.set_defaults(fn=cmd_disasm)

    p = sub.add_parser("report", help="flatten a saved report to tidy CSV")
    p.add_argument("input", help="report.json or result.json")
    p.add_argument("-o", "--out")
    p.set_defaults(fn=cmd_report)

    return top


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except XbarError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1
    except OSError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
