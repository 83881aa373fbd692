"""Command line front end.

Subcommands: rf-info, detect, certify, evaluate, attack-eval.  All take
--config; --tau/--seed/--workers override the config.  JSON goes to --out
(or stdout), human-readable text to stdout, timing to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from maskcert.defense import DefenseParams, certify_features, detect_features, sweep_features
from maskcert.errors import MaskcertError
from maskcert.harness import (
    apply_overrides,
    attack_eval,
    evaluate,
    load_config,
    render_rf_info,
    rf_info,
)
from maskcert.model import extract_features, load_model
from maskcert.tensorio import load_tensor


def _write_out(payload: str, out: str | None) -> None:
    if out:
        Path(out).write_text(payload)
    else:
        sys.stdout.write(payload)


def _json_dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _window_json(win) -> list[int] | None:
    return None if win is None else [win.i, win.j, win.size]


def _records_json(records) -> list[dict]:
    return [
        {
            "window": _window_json(r.window),
            "label": r.prediction.label,
            "confidence": r.prediction.confidence,
            "logits": r.prediction.logits.tolist(),
        }
        for r in records
    ]


def _cmd_rf_info(args) -> int:
    config = _load(args)
    info = rf_info(config)
    if args.out:
        _write_out(_json_dumps(info), args.out)
    print(render_rf_info(info))
    return 0


def _load(args):
    config = load_config(args.config)
    return apply_overrides(config, tau=args.tau, seed=args.seed, workers=args.workers)


def _cmd_detect(args) -> int:
    config = _load(args)
    if not config.tau:
        raise MaskcertError("detect needs at least one tau (config or --tau)")
    weights = load_model(config.weights)
    info = rf_info(config)
    results = []
    for image_path in args.image:
        x = load_tensor(image_path)
        u = extract_features(x, weights)
        sweep = sweep_features(u, weights, info["mask_window_size"])
        outcomes = []
        for t in config.tau:
            params = DefenseParams(tau=t, window_size=info["mask_window_size"])
            out = detect_features(u, weights, params, trace=args.trace)
            entry = {
                "tau": t,
                "alert": out.alert,
                "label": out.label,
                "trigger_window": _window_json(out.trigger),
            }
            if args.trace:
                entry["records"] = _records_json(out.records)
            outcomes.append(entry)
        results.append(
            {
                "image": image_path,
                "prediction": {
                    "label": sweep.base.label,
                    "confidence": sweep.base.confidence,
                    "logits": sweep.base.logits.tolist(),
                },
                "outcomes": outcomes,
            }
        )
    payload = results[0] if len(results) == 1 else results
    _write_out(_json_dumps(payload), args.out)
    for res in results:
        for out in res["outcomes"]:
            verdict = "ALERT" if out["alert"] else f"label {out['label']}"
            print(f"{res['image']}  tau={out['tau']:.3f}  {verdict}")
    return 0


def _cmd_certify(args) -> int:
    config = _load(args)
    if not config.tau:
        raise MaskcertError("certify needs at least one tau (config or --tau)")
    weights = load_model(config.weights)
    info = rf_info(config)
    x = load_tensor(args.image[0])
    u = extract_features(x, weights)
    results = []
    for t in config.tau:
        params = DefenseParams(tau=t, window_size=info["mask_window_size"])
        res = certify_features(u, args.label, weights, params)
        entry = {
            "tau": t,
            "certified": res.certified,
            "failing_window": _window_json(res.failing_window),
            "failure_kind": res.failure_kind,
            "n_windows": len(res.records),
        }
        if args.trace:
            entry["records"] = _records_json(res.records)
        results.append(entry)
    payload = {"image": args.image[0], "label": args.label, "results": results}
    _write_out(_json_dumps(payload), args.out)
    for entry in results:
        verdict = "certified" if entry["certified"] else f"not certified ({entry['failure_kind']})"
        print(f"{args.image[0]}  tau={entry['tau']:.3f}  {verdict}")
    return 0


def _cmd_evaluate(args) -> int:
    config = _load(args)
    report = evaluate(config)
    _write_out(report.to_json(), args.out)
    print(report.render_table())
    print(f"evaluated {report.n_images} images in {report.elapsed_seconds:.2f}s", file=sys.stderr)
    return 0


def _cmd_attack_eval(args) -> int:
    config = _load(args)
    report = attack_eval(config)
    _write_out(report.to_json(), args.out)
    print(
        f"{report.n_images} images, {report.total_violations} violations "
        f"(budget {report.budget}, stride {report.stride})"
    )
    print(f"attack-eval took {report.elapsed_seconds:.2f}s", file=sys.stderr)
    return 0 if report.total_violations == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskcert",
        description="certified adversarial-patch detection via feature-space window masking",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--tau", type=float, action="append", help="override tau grid (repeatable)")
        p.add_argument("--seed", type=int, default=None, help="override RNG seed")
        p.add_argument("--workers", type=int, default=None, help="override worker count")
        p.add_argument("--out", default=None, help="write the JSON report here")
        p.add_argument("--trace", action="store_true", help="include per-window records")

    p = sub.add_parser("rf-info", help="print receptive field and mask geometry")
    common(p)
    p.set_defaults(fn=_cmd_rf_info)

    p = sub.add_parser("detect", help="run attack detection on one or more images")
    common(p)
    p.add_argument("--image", action="append", required=True, help="tensor file (repeatable)")
    p.set_defaults(fn=_cmd_detect)

    p = sub.add_parser("certify", help="run the provable analysis for one image")
    common(p)
    p.add_argument("--image", action="append", required=True, help="tensor file")
    p.add_argument("--label", type=int, required=True, help="true class index")
    p.set_defaults(fn=_cmd_certify)

    p = sub.add_parser("evaluate", help="clean/robust accuracy over a dataset")
    common(p)
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("attack-eval", help="attack sweeps against a dataset")
    common(p)
    p.set_defaults(fn=_cmd_attack_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except MaskcertError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
