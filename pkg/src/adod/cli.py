"""Command-line entry point: one binary, six subcommands.

Exit codes form a fixed contract so shell scripts can branch on them:
0 success, 1 I/O failure, 2 invalid configuration or inputs, 3 numeric
abort (nonfinite loss or a failed gradient check).

Every run writes two bookkeeping files into its output directory: a
``resolved-config`` capturing the effective semantic configuration
(byte-reproducible) and a ``run-metadata.json`` holding argv and wall-clock
timestamps (deliberately kept out of the reproducible set).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace

from .datasets import (
    class_names_for,
    generate_synthetic_dataset,
    load_manifest,
    read_class_names,
)
from .evaluation import (
    EvalConfig,
    evaluate_detections,
    render_report,
    emit_report,
    with_class_names,
)
from .gradcheck import check_broken_op, standard_suite
from .inference import detect_on_manifest, ground_truth_map, write_overlays
from .network import (
    NETWORK_CONFIG_KEYS,
    build_network,
    load_checkpoint,
    network_spec_from_mapping,
    network_spec_to_mapping,
    parse_kv_text,
)
from .postprocess import (
    DEFAULT_DETECT_CONF,
    DEFAULT_EVAL_CONF,
    DEFAULT_NMS_IOU,
    parse_detections,
    write_detections,
)
from .training import (
    TRAIN_CONFIG_KEYS,
    NumericAbort,
    train,
    train_config_from_mapping,
    train_config_to_mapping,
)

EXIT_OK = 0
EXIT_IO = 1
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3


class CliError(Exception):
    def __init__(self, exit_code: int, message: str):
        super().__init__(message)
        self.exit_code = exit_code


# -- configuration plumbing --------------------------------------------------

GEN_CONFIG_KEYS = (
    "seed",
    "n_images",
    "num_classes",
    "num_domains",
    "image_size",
    "objects_min",
    "objects_max",
    "radius_min",
    "radius_max",
    "noise",
    "domain_presets",
)

DETECT_CONFIG_KEYS = ("conf_threshold", "nms_iou")

EVAL_CONFIG_KEYS = ("iou_match_threshold", "interpolation")

ABLATE_CONFIG_KEYS = ("n_val_images", "cast_preset")

# one flat vocabulary; each subcommand reads the subset it understands
ALL_CONFIG_KEYS = tuple(
    dict.fromkeys(
        NETWORK_CONFIG_KEYS
        + TRAIN_CONFIG_KEYS
        + GEN_CONFIG_KEYS
        + DETECT_CONFIG_KEYS
        + EVAL_CONFIG_KEYS
        + ABLATE_CONFIG_KEYS
    )
)


def _read_text(path, what: str) -> str:
    if not os.path.isfile(path):
        raise CliError(EXIT_VALIDATION, f"{what} not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return fh.read()
    except OSError as err:
        raise CliError(EXIT_IO, f"cannot read {what} {path}: {err}") from err


def _gather_config(args, defaults=None) -> dict:
    mapping = dict(defaults or {})
    if args.config:
        try:
            mapping.update(parse_kv_text(_read_text(args.config, "config file")))
        except ValueError as err:
            raise CliError(EXIT_VALIDATION, f"{args.config}: {err}") from None
    for item in args.set or []:
        if "=" not in item:
            raise CliError(EXIT_VALIDATION, f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        if not key:
            raise CliError(EXIT_VALIDATION, f"--set expects a nonempty key, got {item!r}")
        mapping[key] = value.strip()
    unknown = sorted(key for key in mapping if key not in ALL_CONFIG_KEYS)
    if unknown:
        raise CliError(
            EXIT_VALIDATION, "unknown configuration keys: " + ", ".join(unknown)
        )
    return mapping


def _resolve_seed(args, mapping: dict) -> int:
    if args.seed is not None:
        seed = args.seed
    elif "seed" in mapping:
        try:
            seed = int(mapping["seed"])
        except ValueError:
            raise CliError(
                EXIT_VALIDATION, f"seed: expected an integer, got {mapping['seed']!r}"
            ) from None
    elif os.environ.get("ADOD_SEED"):
        raw = os.environ["ADOD_SEED"]
        try:
            seed = int(raw)
        except ValueError:
            raise CliError(
                EXIT_VALIDATION, f"ADOD_SEED must be an integer, got {raw!r}"
            ) from None
    else:
        seed = 0
    if seed < 0:
        raise CliError(EXIT_VALIDATION, f"seed must be >= 0, got {seed}")
    mapping["seed"] = str(seed)
    return seed


def _int_key(mapping: dict, key: str, default: int) -> int:
    if key not in mapping:
        return default
    try:
        return int(mapping[key])
    except ValueError:
        raise CliError(
            EXIT_VALIDATION, f"{key}: expected an integer, got {mapping[key]!r}"
        ) from None


def _float_key(mapping: dict, key: str, default: float) -> float:
    if key not in mapping:
        return default
    try:
        return float(mapping[key])
    except ValueError:
        raise CliError(
            EXIT_VALIDATION, f"{key}: expected a number, got {mapping[key]!r}"
        ) from None


def _ensure_out(args) -> str:
    out = os.path.abspath(args.out)
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as err:
        raise CliError(EXIT_IO, f"cannot create output directory {out}: {err}") from err
    return out


def _load_manifest_checked(path):
    if not os.path.isfile(path):
        raise CliError(EXIT_VALIDATION, f"manifest not found: {path}")
    try:
        return load_manifest(path)
    except ValueError as err:
        raise CliError(EXIT_VALIDATION, str(err)) from None


def _write_resolved_config(out_dir, resolved: dict) -> None:
    path = os.path.join(out_dir, "resolved-config")
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(resolved):
            fh.write(f"{key} = {resolved[key]}\n")


def _iso(stamp: float) -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(stamp))


def _write_run_metadata(out_dir, args, started: float, inputs=None) -> None:
    finished = time.time()
    meta = {
        "command": args.command,
        "argv": args.argv,
        "started": _iso(started),
        "finished": _iso(finished),
        "elapsed_seconds": round(finished - started, 3),
        "working_directory": os.getcwd(),
    }
    if inputs:
        meta["inputs"] = inputs
    with open(os.path.join(out_dir, "run-metadata.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _gen_kwargs(mapping: dict) -> dict:
    return {
        "image_size": _int_key(mapping, "image_size", 96),
        "objects_per_image": (
            _int_key(mapping, "objects_min", 1),
            _int_key(mapping, "objects_max", 2),
        ),
        "radius_range": (
            _float_key(mapping, "radius_min", 0.12),
            _float_key(mapping, "radius_max", 0.26),
        ),
        "noise": _float_key(mapping, "noise", 0.05),
    }


def _gen_resolved(mapping: dict, seed: int, n_images: int, num_classes: int,
                  num_domains: int, presets) -> dict:
    kwargs = _gen_kwargs(mapping)
    return {
        "seed": str(seed),
        "n_images": str(n_images),
        "num_classes": str(num_classes),
        "num_domains": str(num_domains),
        "image_size": str(kwargs["image_size"]),
        "objects_min": str(kwargs["objects_per_image"][0]),
        "objects_max": str(kwargs["objects_per_image"][1]),
        "radius_min": repr(kwargs["radius_range"][0]),
        "radius_max": repr(kwargs["radius_range"][1]),
        "noise": repr(kwargs["noise"]),
        "domain_presets": ",".join(presets),
    }


def _effective_presets(mapping: dict, num_domains: int):
    raw = mapping.get("domain_presets", "")
    if raw:
        return tuple(part.strip() for part in raw.split(",") if part.strip())
    return tuple("identity" if d == 0 else f"type{d}" for d in range(num_domains))


# -- subcommands -------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    started = time.time()
    mapping = _gather_config(args)
    if args.n is not None:
        mapping["n_images"] = str(args.n)
    if args.domains is not None:
        mapping["num_domains"] = str(args.domains)
    if args.classes is not None:
        mapping["num_classes"] = str(args.classes)
    if args.image_size is not None:
        mapping["image_size"] = str(args.image_size)
    seed = _resolve_seed(args, mapping)
    out = _ensure_out(args)

    n_images = _int_key(mapping, "n_images", 50)
    num_classes = _int_key(mapping, "num_classes", 5)
    num_domains = _int_key(mapping, "num_domains", 1)
    presets = _effective_presets(mapping, num_domains)
    explicit = bool(mapping.get("domain_presets", ""))
    manifest = generate_synthetic_dataset(
        seed,
        n_images,
        num_classes,
        num_domains,
        out,
        domain_presets=presets if explicit else None,
        **_gen_kwargs(mapping),
    )
    _write_resolved_config(
        out, _gen_resolved(mapping, seed, n_images, num_classes, num_domains, presets)
    )
    _write_run_metadata(out, args, started)
    print(f"wrote {len(manifest.samples)} images under {out}")
    print(f"manifest: {manifest.path}")
    return EXIT_OK


def _cmd_train(args) -> int:
    started = time.time()
    mapping = _gather_config(args)
    seed = _resolve_seed(args, mapping)
    out = _ensure_out(args)
    manifest = _load_manifest_checked(args.manifest)
    try:
        spec = network_spec_from_mapping(mapping)
        cfg = train_config_from_mapping(mapping)
    except ValueError as err:
        raise CliError(EXIT_VALIDATION, str(err)) from None

    net = build_network(spec, seed)
    resolved = {**network_spec_to_mapping(spec), **train_config_to_mapping(cfg)}
    _write_resolved_config(out, resolved)
    result = train(net, manifest, cfg, out_dir=out, log=print)

    from .figures import save_loss_curves

    save_loss_curves(result.breakdowns, os.path.join(out, "loss-curves.png"))
    _write_run_metadata(out, args, started, {"manifest": manifest.path})
    final = result.breakdowns[-1]
    print(
        f"trained {cfg.epochs} epochs on {len(manifest.samples)} images; "
        f"final total loss {final.total:.6f}"
    )
    print(f"checkpoint: {result.checkpoint_paths[-1]}")
    if result.clamp_warnings:
        print(f"warning: {result.clamp_warnings} box encodings were clamped")
    return EXIT_OK


def _resolve_thresholds(args, mapping: dict, default_conf: float):
    conf = args.conf if getattr(args, "conf", None) is not None else _float_key(
        mapping, "conf_threshold", default_conf
    )
    nms_iou = args.nms_iou if getattr(args, "nms_iou", None) is not None else _float_key(
        mapping, "nms_iou", DEFAULT_NMS_IOU
    )
    if not 0.0 <= conf <= 1.0:
        raise CliError(EXIT_VALIDATION, f"conf_threshold must lie in [0, 1], got {conf}")
    if not 0.0 < nms_iou <= 1.0:
        raise CliError(EXIT_VALIDATION, f"nms_iou must lie in (0, 1], got {nms_iou}")
    return float(conf), float(nms_iou)


def _cmd_detect(args) -> int:
    started = time.time()
    mapping = _gather_config(args)
    seed = _resolve_seed(args, mapping)
    out = _ensure_out(args)
    manifest = _load_manifest_checked(args.manifest)
    try:
        spec = network_spec_from_mapping(mapping)
    except ValueError as err:
        raise CliError(EXIT_VALIDATION, str(err)) from None
    conf, nms_iou = _resolve_thresholds(args, mapping, DEFAULT_DETECT_CONF)
    if not os.path.isfile(args.checkpoint):
        raise CliError(EXIT_VALIDATION, f"checkpoint not found: {args.checkpoint}")
    try:
        net = load_checkpoint(args.checkpoint, spec)
    except ValueError as err:
        raise CliError(EXIT_VALIDATION, f"{args.checkpoint}: {err}") from None

    rows = detect_on_manifest(net, manifest, conf, nms_iou)
    dump = os.path.join(out, "detections.txt")
    write_detections(dump, rows)
    if args.overlays:
        write_overlays(manifest, rows, os.path.join(out, "overlays"), spec.num_classes)
    resolved = {
        **network_spec_to_mapping(spec),
        "seed": str(seed),
        "conf_threshold": repr(conf),
        "nms_iou": repr(nms_iou),
    }
    _write_resolved_config(out, resolved)
    _write_run_metadata(
        out, args, started, {"manifest": manifest.path, "checkpoint": args.checkpoint}
    )
    print(f"wrote {len(rows)} detections over {len(manifest.samples)} images to {dump}")
    return EXIT_OK


def _class_names_for_eval(mapping: dict, manifest, rows, gts):
    names_path = os.path.join(manifest.root, "classes.txt")
    if os.path.isfile(names_path):
        try:
            return read_class_names(names_path)
        except ValueError as err:
            raise CliError(EXIT_VALIDATION, str(err)) from None
    if "num_classes" in mapping:
        return class_names_for(_int_key(mapping, "num_classes", 1))
    # no declared class list: infer the count from the data itself
    ids = [det.class_id for _, det in rows]
    ids += [cid for entries in gts.values() for cid, _ in entries]
    return class_names_for(max(ids) + 1 if ids else 1)


def _cmd_eval(args) -> int:
    started = time.time()
    mapping = _gather_config(args)
    seed = _resolve_seed(args, mapping)
    out = _ensure_out(args)
    manifest = _load_manifest_checked(args.manifest)
    if not os.path.isfile(args.detections):
        raise CliError(EXIT_VALIDATION, f"detections file not found: {args.detections}")
    try:
        rows = parse_detections(args.detections)
    except ValueError as err:
        raise CliError(EXIT_VALIDATION, f"{args.detections}: {err}") from None
    gts = ground_truth_map(manifest)
    class_names = _class_names_for_eval(mapping, manifest, rows, gts)

    iou_thr = args.iou if args.iou is not None else _float_key(
        mapping, "iou_match_threshold", 0.5
    )
    interpolation = mapping.get("interpolation", "all_point")
    try:
        config = EvalConfig(iou_match_threshold=iou_thr, interpolation=interpolation)
    except ValueError as err:
        raise CliError(EXIT_VALIDATION, str(err)) from None

    formats = [part.strip() for part in args.formats.split(",") if part.strip()]
    bad = [fmt for fmt in formats if fmt not in ("text", "csv", "json")]
    if bad or not formats:
        raise CliError(
            EXIT_VALIDATION,
            f"--formats takes a comma list drawn from text,csv,json, got {args.formats!r}",
        )

    report, pr_curves = evaluate_detections(rows, gts, len(class_names), config)
    report = with_class_names(report, class_names)
    for fmt in formats:
        suffix = "txt" if fmt == "text" else fmt
        emit_report(report, fmt, os.path.join(out, f"report.{suffix}"))

    from .figures import save_pr_curves

    save_pr_curves(pr_curves, class_names, os.path.join(out, "pr-curves.png"))
    resolved = {
        "seed": str(seed),
        "iou_match_threshold": repr(float(iou_thr)),
        "interpolation": interpolation,
        "num_classes": str(len(class_names)),
    }
    _write_resolved_config(out, resolved)
    _write_run_metadata(
        out, args, started, {"manifest": manifest.path, "detections": args.detections}
    )
    print(render_report(report, "text"))
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    started = time.time()
    mapping = _gather_config(args)
    seed = _resolve_seed(args, mapping)
    out = _ensure_out(args)
    results = standard_suite(seed)
    if args.self_test:
        results.append(check_broken_op(seed))
    lines = [result.summary() for result in results]
    for line in lines:
        print(line)
    with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    _write_resolved_config(out, {"seed": str(seed)})
    _write_run_metadata(out, args, started)
    failed = [result for result in results if not result.passed]
    if failed:
        names = ", ".join(result.name for result in failed)
        print(f"{len(failed)} of {len(results)} checks failed: {names}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"all {len(results)} checks passed")
    return EXIT_OK


ABLATE_COMBOS = (
    ("baseline", False, False, False),
    ("residual", True, False, False),
    ("attention", False, True, False),
    ("domain", False, False, True),
    ("residual+attention", True, True, False),
    ("residual+domain", True, False, True),
    ("attention+domain", False, True, True),
    ("residual+attention+domain", True, True, True),
)

# small-but-trainable defaults; override any of them with --set
_ABLATE_DEFAULTS = {
    "input_width": "64",
    "stage_widths": "4,8,16,32,64",
    "blocks_per_stage": "1,1,1,1,1",
    "num_classes": "3",
    "num_domains": "2",
    "reduction_ratio": "4",
    "learning_rate": "0.005",
    "batch_size": "4",
    "epochs": "12",
    "lambda_domain": "0.5",
    "n_images": "12",
    "n_val_images": "8",
    "image_size": "64",
    "cast_preset": "type8",
}


def _format_cell(value) -> str:
    return "" if value is None else f"{value:.2f}"


def _ablate_csv(entries, class_names) -> str:
    header = ["config", "residual", "attention", "domain"]
    for group in ("clean", "cast"):
        header += [f"{group}_ap_{name}" for name in class_names]
        header.append(f"{group}_map")
    header.append("status")
    lines = [",".join(header)]
    for entry in entries:
        row = [entry["label"]]
        row += ["true" if flag else "false" for flag in entry["toggles"]]
        for group in ("clean", "cast"):
            report = entry.get(group)
            if report is None:
                row += [""] * (len(class_names) + 1)
            else:
                row += [_format_cell(ap) for ap in report.ap_percent]
                row.append(_format_cell(report.map_percent))
        if entry.get("error"):
            text = entry["error"].splitlines()[0].replace(",", ";")
            row.append(f"error: {text}")
        else:
            row.append("ok")
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def _ablate_text(entries, class_names) -> str:
    label_width = max(len("config"), max(len(e["label"]) for e in entries))
    cell = 9
    group_width = (len(class_names) + 1) * cell
    columns = [name[:7] for name in class_names] + ["mAP"]
    lines = [
        " " * label_width
        + " | "
        + "clean".center(group_width)
        + " | "
        + "cast".center(group_width),
        "config".ljust(label_width)
        + " | "
        + "".join(c.rjust(cell) for c in columns)
        + " | "
        + "".join(c.rjust(cell) for c in columns),
        "-" * (label_width + 2 * (group_width + 3)),
    ]
    for entry in entries:
        row = entry["label"].ljust(label_width)
        if entry.get("error"):
            text = entry["error"].splitlines()[0]
            lines.append(f"{row} | error: {text}")
            continue
        for group in ("clean", "cast"):
            report = entry[group]
            cells = [_format_cell(ap) for ap in report.ap_percent]
            cells.append(_format_cell(report.map_percent))
            row += " | " + "".join(c.rjust(cell) for c in cells)
        lines.append(row)
    return "\n".join(lines) + "\n"


def _cmd_ablate(args) -> int:
    started = time.time()
    mapping = _gather_config(args, defaults=_ABLATE_DEFAULTS)
    seed = _resolve_seed(args, mapping)
    out = _ensure_out(args)
    try:
        base_spec = network_spec_from_mapping(mapping)
        cfg = train_config_from_mapping(mapping)
    except ValueError as err:
        raise CliError(EXIT_VALIDATION, str(err)) from None

    n_images = _int_key(mapping, "n_images", 12)
    n_val = _int_key(mapping, "n_val_images", 8)
    cast = mapping.get("cast_preset", "type8")
    num_classes = base_spec.num_classes
    gen_kwargs = _gen_kwargs(mapping)
    conf, nms_iou = _resolve_thresholds(args, mapping, DEFAULT_EVAL_CONF)
    interpolation = mapping.get("interpolation", "all_point")
    try:
        eval_cfg = EvalConfig(
            iou_match_threshold=_float_key(mapping, "iou_match_threshold", 0.5),
            interpolation=interpolation,
        )
    except ValueError as err:
        raise CliError(EXIT_VALIDATION, str(err)) from None

    data_dir = os.path.join(out, "data")
    train_manifest = generate_synthetic_dataset(
        seed, n_images, num_classes, 2, os.path.join(data_dir, "train"),
        domain_presets=("identity", cast), **gen_kwargs,
    )
    # the two validation splits share a render seed, so they show the same
    # scenes and differ only by the applied cast
    val_clean = generate_synthetic_dataset(
        seed + 1, n_val, num_classes, 1, os.path.join(data_dir, "val-clean"),
        domain_presets=("identity",), **gen_kwargs,
    )
    val_cast = generate_synthetic_dataset(
        seed + 1, n_val, num_classes, 1, os.path.join(data_dir, "val-cast"),
        domain_presets=(cast,), **gen_kwargs,
    )
    gts = {"clean": ground_truth_map(val_clean), "cast": ground_truth_map(val_cast)}
    val_manifests = {"clean": val_clean, "cast": val_cast}
    class_names = class_names_for(num_classes)

    entries = []
    for label, use_res, use_att, use_dom in ABLATE_COMBOS:
        spec = replace(
            base_spec,
            use_residual=use_res,
            use_channel_attention=use_att,
            use_domain=use_dom,
        )
        entry = {"label": label, "toggles": (use_res, use_att, use_dom)}
        run_dir = os.path.join(out, "runs", label)
        try:
            net = build_network(spec, seed)
            train(net, train_manifest, cfg, out_dir=run_dir)
            for group in ("clean", "cast"):
                rows = detect_on_manifest(net, val_manifests[group], conf, nms_iou)
                report, _ = evaluate_detections(rows, gts[group], num_classes, eval_cfg)
                entry[group] = with_class_names(report, class_names)
            print(
                f"[{label}] mAP clean {entry['clean'].map_percent:.2f}, "
                f"cast {entry['cast'].map_percent:.2f}"
            )
        except Exception as err:  # a broken row must not sink the others
            entry["error"] = str(err) or type(err).__name__
            print(f"[{label}] failed: {entry['error']}", file=sys.stderr)
        entries.append(entry)

    csv_text = _ablate_csv(entries, class_names)
    with open(os.path.join(out, "ablation.csv"), "w", encoding="utf-8") as fh:
        fh.write(csv_text)
    table = _ablate_text(entries, class_names)
    with open(os.path.join(out, "ablation.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)

    from .figures import save_ablation_bars

    save_ablation_bars(
        [entry["label"] for entry in entries],
        [entry["clean"].map_percent if "clean" in entry else None for entry in entries],
        [entry["cast"].map_percent if "cast" in entry else None for entry in entries],
        os.path.join(out, "ablation.png"),
    )

    resolved = {
        **network_spec_to_mapping(base_spec),
        **train_config_to_mapping(cfg),
        "n_images": str(n_images),
        "n_val_images": str(n_val),
        "cast_preset": cast,
        "image_size": str(gen_kwargs["image_size"]),
        "objects_min": str(gen_kwargs["objects_per_image"][0]),
        "objects_max": str(gen_kwargs["objects_per_image"][1]),
        "radius_min": repr(gen_kwargs["radius_range"][0]),
        "radius_max": repr(gen_kwargs["radius_range"][1]),
        "noise": repr(gen_kwargs["noise"]),
        "conf_threshold": repr(conf),
        "nms_iou": repr(nms_iou),
        "iou_match_threshold": repr(eval_cfg.iou_match_threshold),
        "interpolation": interpolation,
    }
    _write_resolved_config(out, resolved)
    _write_run_metadata(out, args, started)
    print(table, end="")
    failures = sum(1 for entry in entries if entry.get("error"))
    if failures:
        print(f"{failures} of {len(entries)} configurations failed", file=sys.stderr)
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def _add_common(sub) -> None:
    sub.add_argument("--out", required=True, help="output directory for run artifacts")
    sub.add_argument("--config", help="key = value configuration file")
    sub.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override one configuration key (repeatable)",
    )
    sub.add_argument(
        "--seed",
        type=int,
        help="random seed (falls back to ADOD_SEED, then 0)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adod",
        description="Underwater-flavored multi-scale detector toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", help="render a synthetic labeled dataset")
    _add_common(p)
    p.add_argument("--n", type=int, help="number of images")
    p.add_argument("--domains", type=int, help="number of cast domains")
    p.add_argument("--classes", type=int, help="number of object classes")
    p.add_argument("--image-size", type=int, help="square image side in pixels")
    p.set_defaults(handler=_cmd_gen_data)

    p = sub.add_parser("train", help="train a detector on a manifest")
    _add_common(p)
    p.add_argument("--manifest", required=True, help="dataset manifest path")
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("detect", help="run a checkpoint over a manifest")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--manifest", required=True, help="dataset manifest path")
    p.add_argument("--conf", type=float, help="score threshold in [0, 1]")
    p.add_argument("--nms-iou", type=float, help="suppression IoU threshold in (0, 1]")
    p.add_argument(
        "--overlays", action="store_true", help="also write annotated PPM overlays"
    )
    p.set_defaults(handler=_cmd_detect)

    p = sub.add_parser("eval", help="score a detection dump against ground truth")
    _add_common(p)
    p.add_argument("--detections", required=True, help="detection dump file")
    p.add_argument("--manifest", required=True, help="dataset manifest path")
    p.add_argument("--iou", type=float, help="match IoU threshold in (0, 1)")
    p.add_argument(
        "--formats",
        default="text,csv,json",
        help="comma list of report formats: text,csv,json",
    )
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _add_common(p)
    p.add_argument(
        "--self-test",
        action="store_true",
        help="also run the deliberately broken op (must fail)",
    )
    p.set_defaults(handler=_cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and score every module combination")
    _add_common(p)
    p.set_defaults(handler=_cmd_ablate)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    try:
        return args.handler(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code
    except NumericAbort as err:
        print(f"numeric abort: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as err:
        print(f"io error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
