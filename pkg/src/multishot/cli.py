"""Command-line entry point: ``multishot <subcommand> ...``.

Exit codes: 0 success, 1 validation or domain error (also bad usage),
2 I/O failure. Errors are reported on stderr as one JSON object unless
``--no-json-errors`` is given.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import attention, camera, curation, metrics, shot_mask, tensorio
from .errors import DomainError, LoadError

CONFIG_ENV = "MULTISHOT_CONFIG"


class UsageError(DomainError):
    pass


# -- config -----------------------------------------------------------------------

@dataclass(frozen=True)
class ToolConfig:
    d_model: int = 64
    n_heads: int = 4
    layers: int = 4
    full_visibility_layers: int = 2
    conv_kernel: int = 2
    conv_depth: int = 1
    mlp_hidden: int | None = None
    residual: bool = False
    center_sampling: bool = False
    use_mask: bool = True
    use_extrinsic_branch: bool = True
    use_plucker_branch: bool = True
    seed: int = 0
    thresholds: curation.CurationThresholds = curation.CurationThresholds()
    explicit: frozenset = frozenset()

    def block_config(self, full_visibility_layers: int | None = None) -> attention.BlockConfig:
        fvl = self.full_visibility_layers
        if full_visibility_layers is not None and "full_visibility_layers" not in self.explicit:
            fvl = full_visibility_layers
        return attention.BlockConfig(
            layers=self.layers, full_visibility_layers=fvl, use_mask=self.use_mask,
            use_extrinsic_branch=self.use_extrinsic_branch, use_plucker_branch=self.use_plucker_branch,
            d_model=self.d_model, n_heads=self.n_heads, conv_kernel=self.conv_kernel,
            conv_depth=self.conv_depth, mlp_hidden=self.mlp_hidden, residual=self.residual,
            center_sampling=self.center_sampling, seed=self.seed,
        )


def parse_key_values(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; blank lines ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise LoadError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _coerce(value: str, kind) -> Any:
    if kind is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if value.lower() == "none":
        return None
    return int(value)


_CONFIG_KINDS = {
    "d_model": int, "n_heads": int, "layers": int, "full_visibility_layers": int,
    "conv_kernel": int, "conv_depth": int, "mlp_hidden": int, "seed": int,
    "residual": bool, "center_sampling": bool, "use_mask": bool,
    "use_extrinsic_branch": bool, "use_plucker_branch": bool,
}


def build_config(values: dict[str, str]) -> ToolConfig:
    kwargs: dict[str, Any] = {}
    thresholds: dict[str, str] = {}
    for key, value in values.items():
        if key.startswith("threshold."):
            thresholds[key[len("threshold."):]] = value
        elif key in _CONFIG_KINDS:
            try:
                kwargs[key] = _coerce(value, _CONFIG_KINDS[key])
            except ValueError as exc:
                raise LoadError(f"config key {key}: {exc}") from None
        else:
            raise LoadError(f"unknown config key {key!r}")
    try:
        kwargs["thresholds"] = curation.CurationThresholds.from_mapping(thresholds)
    except ValueError as exc:
        raise LoadError(f"thresholds: {exc}") from None
    cfg = ToolConfig(**kwargs, explicit=frozenset(values))
    cfg.block_config()  # validate against the attention-core invariants
    return cfg


def load_config(path: str | None, overrides: Sequence[str] = ()) -> ToolConfig:
    values: dict[str, str] = {}
    path = path or os.environ.get(CONFIG_ENV)
    if path:
        values.update(parse_key_values(Path(path).read_text(), str(path)))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        values[key] = value
    return build_config(values)


def load_thresholds(spec: str) -> curation.CurationThresholds:
    if spec == "default":
        return curation.CurationThresholds()
    values = parse_key_values(Path(spec).read_text(), spec)
    try:
        return curation.CurationThresholds.from_mapping(
            {k.removeprefix("threshold."): v for k, v in values.items()}
        )
    except ValueError as exc:
        raise LoadError(f"{spec}: {exc}") from None


# -- output helpers ---------------------------------------------------------------

def _dumps(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2)


def _write_text(path: str, text: str) -> None:
    tensorio.atomic_write_bytes(path, text.encode())


def _emit(text: str, path: str | None) -> None:
    if path and path != "-":
        _write_text(path, text)
    else:
        sys.stdout.write(text)


def _read_jsonl(path: str) -> list[Any]:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise LoadError(f"{path}:{lineno}: {exc}") from None
    return out


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        h, w = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--grid expects HxW, got {text!r}") from None
    return h, w


# -- subcommands ------------------------------------------------------------------

def cmd_plucker(args, cfg: ToolConfig) -> int:
    poses = sorted(camera.load_trajectory(args.trajectory), key=lambda p: p.frame_index)
    h, w = _parse_grid(args.grid)
    center = args.center or cfg.center_sampling
    maps = [camera.plucker_map(p, h, w, center=center).data for p in poses]
    tensorio.save(args.out, maps)
    return 0


def cmd_mask(args, cfg: ToolConfig) -> int:
    layout, fvl = shot_mask.load_layout(args.layout)
    if "full_visibility_layers" in cfg.explicit:
        fvl = cfg.full_visibility_layers
    base = shot_mask.build_mask(layout)
    mask = shot_mask.mask_for_layer(base, args.layer, fvl) if args.layer is not None else base
    doc = {
        "n_tokens": layout.n_tokens,
        "full_visibility_layers": fvl,
        "layer": args.layer,
        "stats": shot_mask.mask_stats(mask, layout).to_json(),
    }
    blocks_text = _dumps(shot_mask.blocks_to_json(layout, shot_mask.mask_blocks(layout))) + "\n"
    pgm = shot_mask.mask_to_pgm(mask)
    if args.blocks_out:
        _write_text(args.blocks_out, blocks_text)
    if args.pgm_out:
        tensorio.atomic_write_bytes(args.pgm_out, pgm)
    sys.stdout.write(_dumps(doc) + "\n")
    return 0


def cmd_curate(args, cfg: ToolConfig) -> int:
    records = curation.read_records(args.records)
    captions = curation.read_captions(args.captions) if args.captions else None
    if args.thresholds:
        thresholds = load_thresholds(args.thresholds)
    else:
        thresholds = cfg.thresholds
    reports, summary = curation.curate(records, captions, thresholds)
    lines = "".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in reports)
    if args.summary:
        _emit(lines, args.out)
        _write_text(args.summary, _dumps(summary) + "\n")
    else:
        _emit(lines + json.dumps({"summary": summary}, sort_keys=True) + "\n", args.out)
    return 0


def cmd_metrics(args, cfg: ToolConfig) -> int:
    kind = args.metric
    if kind == "confidence":
        rows = _read_jsonl(args.input)
        per = []
        for i, row in enumerate(rows):
            logits = row["logits"] if isinstance(row, dict) else row
            clip = row.get("clip_id", str(i)) if isinstance(row, dict) else str(i)
            per.append({"clip_id": clip, "confidence": metrics.transition_confidence(logits)})
        if not per:
            raise DomainError("no logit sequences in input")
        doc = {"per_clip": per, "mean": float(np.mean([p["confidence"] for p in per]))}
    elif kind == "types":
        try:
            preds = [
                metrics.TypedPrediction(str(r.get("clip_id", i)), r["predicted"], r["ground_truth"])
                for i, r in enumerate(_read_jsonl(args.input))
            ]
        except (KeyError, AttributeError) as exc:
            raise LoadError(f"prediction rows need 'predicted' and 'ground_truth': {exc}") from None
        doc = {
            "n": len(preds),
            "accuracy": metrics.type_accuracy(preds),
            "distribution": metrics.type_distribution(preds),
        }
    elif kind == "consistency":
        per = []
        for i, r in enumerate(_read_jsonl(args.input)):
            try:
                sem, vis = metrics.consistency_scores(
                    r["semantic_a"], r["semantic_b"], r["subject_sims"], r["background_sims"]
                )
            except (KeyError, TypeError) as exc:
                raise LoadError(f"consistency row {i}: {exc!r}") from None
            per.append({"clip_id": str(r.get("clip_id", i)), "semantic": sem, "visual": vis})
        if not per:
            raise DomainError("no rows in input")
        doc = {
            "per_clip": per,
            "semantic_mean": float(np.mean([p["semantic"] for p in per])),
            "visual_mean": float(np.mean([p["visual"] for p in per])),
        }
    else:  # fvd
        a, b = (tensorio.load(p) for p in (args.a, args.b))
        if len(a) != 1 or len(b) != 1:
            raise LoadError("each feature file must hold exactly one (n, dim) tensor")
        doc = {"frechet_distance": metrics.frechet_distance(a[0], b[0]),
               "n_a": int(a[0].shape[0]), "n_b": int(b[0].shape[0])}
    sys.stdout.write(_dumps(doc) + "\n")
    return 0


def shot_trajectories(layout: shot_mask.TokenLayout, poses: Sequence[camera.CameraPose]):
    """Group frame-indexed poses by shot; a shot with one pose is treated as static."""
    by_frame = {p.frame_index: p for p in poses}
    out = []
    for s in layout.shots:
        inside = [by_frame[f] for f in range(s.frame_start, s.frame_end) if f in by_frame]
        if len(inside) not in (1, s.n_frames):
            raise DomainError(
                f"shot {s.shot_id} covers frames [{s.frame_start}, {s.frame_end}) but the "
                f"trajectory has {len(inside)} of them; give one pose or one per frame"
            )
        out.append(inside)
    extra = set(by_frame) - set(range(layout.frames))
    if extra:
        raise DomainError(f"trajectory frames {sorted(extra)} fall outside the layout")
    return out


def cmd_demo_forward(args, cfg: ToolConfig) -> int:
    layout, fvl = shot_mask.load_layout(args.layout)
    poses = shot_trajectories(layout, camera.load_trajectory(args.trajectory))
    block = cfg.block_config(full_visibility_layers=fvl)
    model = attention.ToyTransformer.init(block)
    rng = np.random.default_rng(cfg.seed)
    z = rng.standard_normal((layout.n_visual, block.d_model))
    text = rng.standard_normal((layout.n_text, block.d_model))
    out = attention.block_forward(model, layout, z, text, poses)
    doc = {
        "config": {k: v for k, v in dataclasses.asdict(block).items()},
        "shape": list(out.shape),
        "output": out.tolist(),
        "layer_mask_density": attention.layer_mask_densities(block, layout),
    }
    _write_text(args.out, _dumps(doc) + "\n")
    return 0


def cmd_gradcheck(args, cfg: ToolConfig) -> int:
    seed = cfg.seed if args.seed is None else args.seed
    errors = attention.gradcheck(seed)
    worst = max(errors.values())
    doc = {"seed": seed, "threshold": args.threshold, "max_relative_error": worst,
           "per_tensor": errors}
    sys.stdout.write(_dumps(doc) + "\n")
    return 0 if worst < args.threshold else 1


# -- parser -----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="multishot", description=__doc__.splitlines()[0])
    p.add_argument("--config", help=f"key = value config file (default: ${CONFIG_ENV})")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; wins over the config file")
    p.add_argument("--json-errors", action=argparse.BooleanOptionalAction, default=True,
                   help="report errors as JSON on stderr (default on)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("plucker", help="write per-frame Plücker maps for a trajectory")
    s.add_argument("--trajectory", required=True)
    s.add_argument("--grid", required=True, help="HxW cells, e.g. 4x4")
    s.add_argument("--out", required=True)
    s.add_argument("--center", action="store_true", help="sample cell centers, not corners")
    s.set_defaults(func=cmd_plucker)

    s = sub.add_parser("mask", help="build a shot-aware mask and report its densities")
    s.add_argument("--layout", required=True)
    s.add_argument("--layer", type=int, help="apply the early-layer schedule for this depth")
    s.add_argument("--blocks-out", help="write the block-descriptor JSON here")
    s.add_argument("--pgm-out", help="write a grayscale PGM image of the mask here")
    s.set_defaults(func=cmd_mask)

    s = sub.add_parser("curate", help="filter clip records")
    s.add_argument("--records", required=True, help="line-delimited JSON records")
    s.add_argument("--captions", help="line-delimited JSON captions keyed by clip_id")
    s.add_argument("--thresholds", help="'default' or a key = value file")
    s.add_argument("--out", help="report lines (default stdout)")
    s.add_argument("--summary", help="summary JSON path (default: last stdout line)")
    s.set_defaults(func=cmd_curate)

    s = sub.add_parser("metrics", help="evaluation metrics")
    msub = s.add_subparsers(dest="metric", required=True, parser_class=_Parser)
    for name, helptext in (("confidence", "transition confidence from logits"),
                           ("types", "transition type accuracy and distribution"),
                           ("consistency", "cross-shot semantic and visual consistency")):
        m = msub.add_parser(name, help=helptext)
        m.add_argument("--input", required=True)
        m.set_defaults(func=cmd_metrics)
    m = msub.add_parser("fvd", help="Fréchet distance between two feature tensors")
    m.add_argument("--a", required=True)
    m.add_argument("--b", required=True)
    m.set_defaults(func=cmd_metrics)

    s = sub.add_parser("demo-forward", help="run the toy conditioned transformer once")
    s.add_argument("--layout", required=True)
    s.add_argument("--trajectory", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_demo_forward)

    s = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    s.add_argument("--seed", type=int)
    s.add_argument("--threshold", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)
    return p


def _report(exc: Exception, json_errors: bool, kind: str) -> None:
    if json_errors:
        sys.stderr.write(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}) + "\n")
    else:
        sys.stderr.write(f"multishot: {kind} error: {exc}\n")


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    json_errors = "--no-json-errors" not in argv
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config, args.set)
        return args.func(args, cfg)
    except (DomainError, KeyError, TypeError, ValueError) as exc:
        _report(exc, json_errors, "validation")
        return 1
    except OSError as exc:
        _report(exc, json_errors, "io")
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
