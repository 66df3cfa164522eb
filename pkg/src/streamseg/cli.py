"""Command-line front end: ``streamseg <command> ...``.

Exit codes: 0 ok, 1 usage, 2 validation (bad model or input files),
3 simulation failure (deadlock, exhausted budget, output mismatch).
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import cost_model, plotting, seg_metrics
from .dataflow_sim import (
    SimConfig,
    SimulationError,
    baseline_depths,
    optimize_fifo_depths,
    simulate,
)
from .files import (
    FormatError,
    load_model,
    load_model_doc,
    preprocess,
    read_image,
    read_labels,
    save_model,
    write_labels,
    write_tensor,
)
from .fixed_point import FixedPointError, FxTensor
from .model_ir import (
    FILTER_PRESETS,
    QUANT_PRESETS,
    GraphError,
    Kind,
    block_table,
    build_enet,
    parameter_count,
    validate,
)
from .reference import error_bounds, run_fixed, run_float
from .reports import format_table, shape_str
from .stream_kernels import same_padding

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_SIMULATION = 0, 1, 2, 3
IMAGE_SUFFIXES = (".ppm", ".bin", ".raw")
DEFAULTS = {"reuse_factor": 1, "clock_ns": 7.0, "batch": 1, "impl": "line", "margin": 1.0,
            "calibration": 3}


class UsageError(Exception):
    pass


class ValidationFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


# -- shared helpers ----------------------------------------------------------------

def _load(args):
    graph = load_model(args.model)
    diags = validate(graph)
    if diags:
        raise ValidationFailure("\n".join(f"invalid model: {d}" for d in diags))
    doc = load_model_doc(args.model)
    return graph, doc


def _setting(args, doc, name):
    """CLI flag > model JSON ``sim`` field > built-in default."""
    value = getattr(args, name, None)
    if value is not None:
        return value
    return doc.get("sim", {}).get(name, DEFAULTS[name])


def _images(args, graph) -> list[tuple[str, FxTensor]]:
    out = []
    for p in getattr(args, "images", None) or []:
        p = Path(p)
        files = sorted(f for f in p.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES) if p.is_dir() else [p]
        for f in files:
            out.append((f.stem, preprocess(read_image(f), graph.input_shape)))
    n_syn = getattr(args, "synthetic", 0) or 0
    if n_syn:
        rng = np.random.default_rng(args.seed)
        for i in range(n_syn):
            img = rng.integers(0, 256, size=graph.input_shape)
            out.append((f"synthetic{i}", preprocess(img, graph.input_shape)))
    return out


def _depths(args, doc, graph):
    path = getattr(args, "depths", None)
    if path:
        data = json.loads(Path(path).read_text())
        return dict(data.get("depths", data))
    if "fifo_depths" in doc:
        return dict(doc["fifo_depths"])
    return baseline_depths(graph)


def _out_dir(args) -> Path | None:
    if getattr(args, "out_dir", None):
        d = Path(args.out_dir)
        d.mkdir(parents=True, exist_ok=True)
        return d
    return None


def _emit(args, name: str, table: str, payload: dict) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, indent=2))
    else:
        print(table)
    d = _out_dir(args)
    if d is not None:
        (d / f"{name}.json").write_text(json.dumps(payload, indent=2))


def _sim_or_fail(graph, images, cfg):
    res = simulate(graph, images, cfg, check=False)
    if not res.completed:
        raise SimulationError(f"simulation ended with status {res.status}\n{res.dump}", res)
    return res


# -- commands ----------------------------------------------------------------------

def cmd_init(args):
    if args.filters:
        filters = [int(v) for v in args.filters.split(",")]
    else:
        filters = FILTER_PRESETS[args.preset]
    shape = tuple(int(v) for v in args.input_shape.split(","))
    try:
        graph = build_enet(filters, shape, args.quant, seed=args.seed,
                           hls_compat_mode=args.hls_compat, name=args.name)
    except ValueError as exc:
        raise ValidationFailure(str(exc)) from None
    path = save_model(graph, args.out)
    print(f"wrote {path} ({len(graph.nodes)} nodes, {parameter_count(graph)} parameters)")
    return EXIT_OK


def cmd_build(args):
    graph, _ = _load(args)
    rows = [(name, kind, shape_str(shape)) for name, kind, shape in block_table(graph)]
    shapes = graph.shapes()
    fmts = graph.formats()
    n_params = parameter_count(graph)
    table = format_table(["Layer", "Type", "Output resolution"], rows, title=f"model {graph.name}")
    table += f"\nparameters: {n_params}"
    if args.layers:
        layer_rows = [(nid, graph.node(nid).kind.value, shape_str(shapes[nid]), str(fmts[nid]))
                      for nid in graph.topo_order()]
        table += "\n\n" + format_table(["node", "kind", "shape", "format"], layer_rows)
    payload = {
        "name": graph.name,
        "parameters": n_params,
        "blocks": [{"layer": n, "type": k, "shape": list(s)} for n, k, s in block_table(graph)],
        "nodes": {nid: {"shape": list(shapes[nid]), "format": str(fmts[nid])} for nid in shapes},
    }
    _emit(args, "build", table, payload)
    return EXIT_OK


def cmd_run(args):
    graph, doc = _load(args)
    images = _images(args, graph)
    if not images:
        raise UsageError("run needs at least one image (or --synthetic N)")
    out_dir = _out_dir(args) or Path(".")
    out_id = graph.output_node.id
    rows, records = [], []
    cycles = None
    if args.mode == "fixed-stream":
        cfg = SimConfig(fifo_depths=_depths(args, doc, graph),
                        reuse_factor=int(_setting(args, doc, "reuse_factor")),
                        window_impl=_setting(args, doc, "impl"))
        res = _sim_or_fail(graph, [x for _, x in images], cfg)
        outputs = res.outputs
        cycles = res.makespan_cycles
    elif args.mode == "fixed-seq":
        outputs = [run_fixed(graph, x)[out_id] for _, x in images]
    else:
        outputs = [run_float(graph, x.values())[out_id] for _, x in images]

    for (stem, x), out in zip(images, outputs):
        write_tensor(out_dir / f"{stem}.{args.mode}.bin", out)
        labels = seg_metrics.decode(out)
        write_labels(out_dir / f"{stem}.{args.mode}.labels.pgm", labels)
        rec = {"image": stem, "mode": args.mode, "shape": list(np.shape(out.mantissas if isinstance(out, FxTensor) else out))}
        if args.mode != "float":
            facts = run_float(graph, x.values())
            bound = error_bounds(graph, facts)[out_id]
            diff = float(np.abs(out.values() - facts[out_id]).max())
            rec.update(max_abs_error_vs_float=diff, error_bound=bound)
        records.append(rec)
        rows.append((stem, args.mode, shape_str(rec["shape"]),
                     rec.get("max_abs_error_vs_float", "-"), rec.get("error_bound", "-")))
    table = format_table(["image", "mode", "output", "max|fixed-float|", "bound"], rows)
    if cycles is not None:
        table += f"\nmakespan: {cycles} cycles for {len(images)} image(s)"
    _emit(args, "run", table, {"images": records, "makespan_cycles": cycles})
    return EXIT_OK


def cmd_profile_fifos(args):
    graph, doc = _load(args)
    images = _images(args, graph)
    if not images:
        raise UsageError("profile-fifos needs calibration images (or --synthetic N)")
    cfg = SimConfig(fifo_depths=baseline_depths(graph),
                    reuse_factor=int(_setting(args, doc, "reuse_factor")))
    res = _sim_or_fail(graph, [x for _, x in images], cfg)
    trace = res.trace
    out_dir = _out_dir(args)
    csv_text = trace.to_csv()
    if out_dir is not None:
        (out_dir / "fifo_occupancy.csv").write_text(csv_text)
        plotting.plot_fifo_occupancy(trace, out_dir / "fifo_occupancy.png")
    summary = {
        "images": len(images),
        "makespan_cycles": res.makespan_cycles,
        "fifos": len(trace.edges),
        "sum_depth": sum(e.capacity for e in trace.edges),
        "sum_max_occupancy": sum(e.max_occupancy for e in trace.edges),
        "memory_efficiency": trace.memory_efficiency(),
        "mean_occupancy": trace.mean_occupancy_ratio(),
    }
    if args.json:
        print(json.dumps(summary, indent=2))
    else:
        print(csv_text, end="")
        print(format_table(["metric", "value"], list(summary.items())))
    if out_dir is not None:
        (out_dir / "profile-fifos.json").write_text(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_optimize_fifos(args):
    graph, doc = _load(args)
    images = _images(args, graph)
    n_cal = int(_setting(args, doc, "calibration"))
    images = images[:n_cal]
    if not images:
        raise UsageError("optimize-fifos needs calibration images (or --synthetic N)")
    margin = float(_setting(args, doc, "margin"))
    rf = int(_setting(args, doc, "reuse_factor"))
    xs = [x for _, x in images]
    base_depths = baseline_depths(graph)
    base = _sim_or_fail(graph, xs, SimConfig(fifo_depths=base_depths, reuse_factor=rf))
    depths = optimize_fifo_depths(graph, xs, margin=margin, baseline=base)
    opt = _sim_or_fail(graph, xs, SimConfig(fifo_depths=depths, reuse_factor=rf))
    if any(a != b for a, b in zip(base.outputs, opt.outputs)):
        raise SimulationError("outputs changed after FIFO resizing")
    bits_before = cost_model.fifo_bits(graph, base_depths)
    bits_after = cost_model.fifo_bits(graph, depths)
    payload = {
        "depths": depths,
        "margin": margin,
        "calibration_images": len(xs),
        "reuse_factor": rf,
        "memory_efficiency": base.trace.memory_efficiency(),
        "mean_occupancy": base.trace.mean_occupancy_ratio(),
        "sum_depth_baseline": sum(base_depths.values()),
        "sum_depth_optimized": sum(depths.values()),
        "fifo_bits_baseline": bits_before,
        "fifo_bits_optimized": bits_after,
        "makespan_baseline": base.makespan_cycles,
        "makespan_optimized": opt.makespan_cycles,
    }
    Path(args.out).write_text(json.dumps(payload, indent=2))
    rows = [
        ("No", sum(base_depths.values()), bits_before, base.makespan_cycles),
        ("Yes", sum(depths.values()), bits_after, opt.makespan_cycles),
        ("Improvement", _pct(sum(depths.values()), sum(base_depths.values())),
         _pct(bits_after, bits_before), _pct(opt.makespan_cycles, base.makespan_cycles)),
    ]
    table = format_table(["Optimisation", "FIFO depth", "FIFO bits", "Latency [cycles]"], rows)
    table += (f"\nmemory efficiency {payload['memory_efficiency']:.1%}, "
              f"mean occupancy {payload['mean_occupancy']:.1%}\nwrote {args.out}")
    out_dir = _out_dir(args)
    if out_dir is not None:
        plotting.plot_fifo_occupancy(base.trace, out_dir / "fifo_optimization.png", optimized=depths)
    _emit(args, "optimize-fifos", table, {k: v for k, v in payload.items() if k != "depths"})
    return EXIT_OK


def _pct(new, old) -> str:
    if old == 0:
        return "n/a"
    return f"{100.0 * (new - old) / old:+.0f}%"


def cmd_estimate(args):
    graph, doc = _load(args)
    rf = int(_setting(args, doc, "reuse_factor"))
    clock = float(_setting(args, doc, "clock_ns"))
    batch = int(_setting(args, doc, "batch"))
    impl = _setting(args, doc, "impl")
    depths = _depths(args, doc, graph)
    images = [x for _, x in _images(args, graph)]
    if not images:
        # cycle counts do not depend on pixel values
        images = [preprocess(np.zeros(graph.input_shape, dtype=np.uint8))]
    batch_imgs = [images[i % len(images)] for i in range(batch)]
    res = _sim_or_fail(graph, batch_imgs, SimConfig(fifo_depths=depths, reuse_factor=rf, window_impl=impl))
    est, lat = cost_model.estimate(graph, depths, rf, clock, batch, res.makespan_cycles, impl)
    t = est.totals()
    rows = [(impl, rf, t["buffer_bits"], t["fifo_bits"], t["memory_bits"], t["multipliers"],
             t["register_bits"], t["lut"], lat.cycles, f"{lat.latency_ms:.4f}")]
    table = format_table(
        ["impl", "RF", "buffer bits", "FIFO bits", "memory bits", "DSP (mult)", "FF (reg bits)",
         "LUT", "cycles", f"latency [ms] b={batch}"], rows)
    table += f"\nclock {clock} ns, {lat.per_image_ms:.4f} ms per image"
    out_dir = _out_dir(args)
    if out_dir is not None:
        plotting.plot_resources(est, out_dir / "estimate.png")
    _emit(args, "estimate", table, cost_model.report_dict(est, lat))
    return EXIT_OK


def _predict(graph, x, mode, cfg):
    out_id = graph.output_node.id
    if mode == "float":
        return seg_metrics.decode(run_float(graph, x.values())[out_id])
    if mode == "fixed-seq":
        return seg_metrics.decode(run_fixed(graph, x)[out_id])
    return seg_metrics.decode(_sim_or_fail(graph, [x], cfg).outputs[0])


def _eval_one(job):
    model, img_path, label_path, mode, n_classes = job
    graph = load_model(model)
    x = preprocess(read_image(img_path), graph.input_shape)
    truth = read_labels(label_path)
    pred = _predict(graph, x, mode, SimConfig())
    if truth.shape != pred.shape:
        raise FormatError(f"{label_path}: label map {truth.shape} != prediction {pred.shape}")
    return seg_metrics.confusion_matrix(truth, pred, n_classes)


def _find_label(truth_dir: Path, stem: str) -> Path:
    for suffix in (".pgm", ".bin", ".raw", ".png"):
        p = truth_dir / (stem + suffix)
        if p.exists():
            return p
    raise FormatError(f"no label map for {stem} in {truth_dir}")


def cmd_evaluate(args):
    graph, _ = _load(args)
    n_classes = graph.shapes()[graph.output_node.id][0]
    img_dir, truth_dir = Path(args.images_dir), Path(args.truth)
    imgs = sorted(f for f in img_dir.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
    if not imgs:
        raise UsageError(f"no images found in {img_dir}")
    jobs = [(args.model, f, _find_label(truth_dir, f.stem), args.mode, n_classes) for f in imgs]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            cms = list(ex.map(_eval_one, jobs))
    else:
        cms = [_eval_one(j) for j in jobs]
    cm = np.sum(cms, axis=0)
    ious = seg_metrics.class_iou(cm)
    names = list(seg_metrics.CLASS_NAMES[:n_classes]) if n_classes == seg_metrics.N_CLASSES \
        else [f"class{i}" for i in range(n_classes)]
    acc = seg_metrics.accuracy(cm)
    miou = seg_metrics.miou(cm, strict=args.strict)
    rows = [(n, "absent" if np.isnan(v) else f"{v:.4f}") for n, v in zip(names, ious)]
    table = format_table(["class", "IoU"], rows)
    table += f"\nimages {len(imgs)}  Acc {acc:.4f}  mIoU {miou:.4f}  ({args.mode})"
    out_dir = _out_dir(args)
    if out_dir is not None:
        plotting.plot_class_iou(ious, names, out_dir / "class_iou.png")
    payload = {"images": len(imgs), "mode": args.mode, "accuracy": acc, "miou": miou,
               "class_iou": {n: (None if np.isnan(v) else float(v)) for n, v in zip(names, ious)},
               "confusion_matrix": cm.tolist()}
    _emit(args, "evaluate", table, payload)
    return EXIT_OK


def cmd_compare_impl(args):
    graph, doc = _load(args)
    images = _images(args, graph)
    if not images:
        raise UsageError("compare-impl needs images (or --synthetic N)")
    xs = [x for _, x in images]
    depths = _depths(args, doc, graph)
    line = _sim_or_fail(graph, xs, SimConfig(fifo_depths=depths, window_impl="line"))
    enc = _sim_or_fail(graph, xs, SimConfig(fifo_depths=depths, window_impl="encoded"))
    identical = all(a == b for a, b in zip(line.outputs, enc.outputs))

    shapes, fmts = graph.shapes(), graph.formats()
    rows, plot_rows = [], []
    tot_line = tot_enc = 0
    for nid in graph.topo_order():
        node = graph.node(nid)
        if node.kind not in (Kind.CONV, Kind.MAXPOOL):
            continue
        (src,) = graph.predecessors(nid)
        c, _, w = shapes[src]
        k = node.kernel
        if node.kind == Kind.CONV:
            w += sum(same_padding(k))
        bits = c * fmts[src].total_bits
        le = cost_model.buffer_elements("line", k, w)
        ee = cost_model.buffer_elements("encoded", k, w)
        tot_line += le * bits
        tot_enc += ee * bits
        if k > 1:
            rows.append((nid, k, w, le, ee, le * bits, ee * bits))
            plot_rows.append((nid, le * bits, ee * bits))
    rows.append(("total", "", "", "", "", tot_line, tot_enc))
    table = format_table(["layer", "K", "W", "line elems", "encoded elems", "line bits", "encoded bits"], rows)
    table += (f"\nImprovement {_pct(tot_line, tot_enc)} buffer bits; outputs identical: {identical}; "
              f"makespan line {line.makespan_cycles} / encoded {enc.makespan_cycles} cycles")
    out_dir = _out_dir(args)
    if out_dir is not None:
        plotting.plot_storage_comparison(plot_rows, out_dir / "compare_impl.png")
    _emit(args, "compare-impl", table, {
        "outputs_identical": identical,
        "buffer_bits": {"line": tot_line, "encoded": tot_enc},
        "makespan": {"line": line.makespan_cycles, "encoded": enc.makespan_cycles},
        "layers": [dict(zip(["layer", "K", "W", "line_elems", "encoded_elems", "line_bits",
                             "encoded_bits"], r)) for r in rows[:-1]],
    })
    if not identical:
        raise SimulationError("line-buffer and encoded outputs differ")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------

def _add_images(p, required=False):
    p.add_argument("images", nargs="*", help="image files (.ppm, or .bin with JSON sidecar) or directories")
    p.add_argument("--synthetic", type=int, default=0, metavar="N",
                   help="append N random uint8 images")
    p.add_argument("--seed", type=int, default=0)


def _add_common(p):
    p.add_argument("model", help="model description JSON")
    p.add_argument("--out-dir", help="write JSON reports and figures here")
    p.add_argument("--json", action="store_true", help="print JSON instead of a text table")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="streamseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("init", help="write an ENet-style model with random BN-folded weights")
    p.add_argument("out")
    p.add_argument("--preset", choices=sorted(FILTER_PRESETS), default="enet8")
    p.add_argument("--filters", help="comma-separated f0..f5, overrides --preset")
    p.add_argument("--quant", choices=sorted(QUANT_PRESETS), default="q8")
    p.add_argument("--input-shape", default="3,240,152", help="C,H,W")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hls-compat", action="store_true", help="truncate + wrap instead of round + saturate")
    p.add_argument("--name")
    p.set_defaults(fn=cmd_init)

    p = sub.add_parser("build", help="validate and print the shape table")
    _add_common(p)
    p.add_argument("--layers", action="store_true", help="also list every node")
    p.set_defaults(fn=cmd_build)

    p = sub.add_parser("run", help="inference on images")
    _add_common(p)
    _add_images(p)
    p.add_argument("--mode", choices=["float", "fixed-seq", "fixed-stream"], default="fixed-stream")
    p.add_argument("--rf", dest="reuse_factor", type=int)
    p.add_argument("--impl", choices=["line", "encoded"])
    p.add_argument("--depths", help="FIFO depth map JSON")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("profile-fifos", help="baseline simulation and occupancy CSV")
    _add_common(p)
    _add_images(p)
    p.add_argument("--rf", dest="reuse_factor", type=int)
    p.set_defaults(fn=cmd_profile_fifos)

    p = sub.add_parser("optimize-fifos", help="size FIFOs from observed occupancy")
    _add_common(p)
    _add_images(p)
    p.add_argument("--margin", type=float)
    p.add_argument("--calibration", type=int, help="number of calibration images to use")
    p.add_argument("--rf", dest="reuse_factor", type=int)
    p.add_argument("--out", default="depths.json", help="depth map output path")
    p.set_defaults(fn=cmd_optimize_fifos)

    p = sub.add_parser("estimate", help="resource and latency report")
    _add_common(p)
    _add_images(p)
    p.add_argument("--rf", dest="reuse_factor", type=int)
    p.add_argument("--clock-ns", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--impl", choices=["line", "encoded"])
    p.add_argument("--depths", help="FIFO depth map JSON (default: tensor-sized)")
    p.set_defaults(fn=cmd_estimate)

    p = sub.add_parser("evaluate", help="Acc / mIoU over an image set")
    _add_common(p)
    p.add_argument("images_dir")
    p.add_argument("--truth", required=True, help="directory of label maps named like the images")
    p.add_argument("--mode", choices=["float", "fixed-seq", "fixed-stream"], default="fixed-seq")
    p.add_argument("--strict", action="store_true", help="count absent classes as IoU 0")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("compare-impl", help="line buffer vs encoded: differential run + storage table")
    _add_common(p)
    _add_images(p)
    p.add_argument("--depths")
    p.set_defaults(fn=cmd_compare_impl)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationFailure, GraphError, FormatError, FixedPointError, OSError, KeyError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SimulationError as exc:
        print(f"simulation failed: {exc}", file=sys.stderr)
        return EXIT_SIMULATION


if __name__ == "__main__":
    sys.exit(main())
