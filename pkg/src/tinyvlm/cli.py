"""Command-line entry point: preprocess, train, gen-data, eval, inspect.

Exit codes: 0 success, 1 domain errors (bad data, missing files, config
contradictions), 2 usage errors (argparse). Every subcommand takes --seed
and is deterministic under it.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .assembler import (
    ChatTurn,
    build_training_sequence,
    decode_with_stopwords,
    load_example_records,
    parse_example_record,
    render_sequence,
)
from .checkpoint import load_arrays
from .config import ModelSpec, load_model_spec
from .docgen import DeterministicMockGenerator, HttpCompletionGenerator, run_pipeline
from .evaluation import (
    BUILTIN_SPECS,
    BenchmarkSpec,
    load_benchmark_file,
    run_benchmark,
    summary_table,
)
from .image import TileConfig, read_image, resize_longest_side, split_into_tiles, write_ppm
from .model import VLM
from .training import (
    Example,
    builtin_config_path,
    load_model_arrays,
    load_stage_file,
    load_training_checkpoint,
    run_stage,
    scale_stage,
)
from .vocab import Vocabulary


def _load_spec(args) -> ModelSpec:
    if getattr(args, "model_config", None):
        return load_model_spec(args.model_config)
    return ModelSpec()


def cmd_preprocess(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = TileConfig(tile_side=args.tile_side, max_long_side=args.max_long_side)
    manifest_path = Path(args.manifest) if args.manifest else out_dir / "manifest.jsonl"
    inputs: list[Path] = []
    for item in args.input:
        p = Path(item)
        if p.is_dir():
            inputs.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in (".png", ".ppm")))
        else:
            inputs.append(p)
    if not inputs:
        raise ValueError("preprocess: no input images found")
    with open(manifest_path, "w", encoding="utf-8") as mf:
        for src in inputs:
            img = read_image(src)
            if max(img.height, img.width) > cfg.max_long_side:
                img = resize_longest_side(img, cfg.max_long_side)
            grid = split_into_tiles(img, cfg)
            tile_paths = []
            for idx, tile in enumerate(grid.tiles):
                r, c = idx // grid.cols + 1, idx % grid.cols + 1
                tp = out_dir / f"{src.stem}_r{r}c{c}.ppm"
                write_ppm(tile, tp)
                tile_paths.append(tp.name)
            gp = out_dir / f"{src.stem}_global.ppm"
            write_ppm(grid.global_image, gp)
            record = {
                "image": str(src),
                "width": img.width,
                "height": img.height,
                "rows": grid.rows,
                "cols": grid.cols,
                "tile_count": len(grid.tiles),
                "tiles": tile_paths,
                "global": gp.name,
            }
            mf.write(json.dumps(record, sort_keys=True) + "\n")
    print(f"preprocessed {len(inputs)} image(s) -> {manifest_path}")
    return 0


def load_dataset_dir(data_dir: str | Path, dataset_ids: set[str]) -> dict[str, list[Example]]:
    data_dir = Path(data_dir)
    out: dict[str, list[Example]] = {}
    for ds in sorted(dataset_ids):
        path = data_dir / f"{ds}.jsonl"
        if not path.exists():
            raise OSError(f"dataset file not found: {path}")
        examples: list[Example] = []
        for line_no, record in enumerate(load_example_records(path), start=1):
            images, turns = parse_example_record(record)
            paths = [str(data_dir / im) for im in images]
            examples.append(Example(f"{ds}:{line_no}", paths, turns))
        out[ds] = examples
    return out


def cmd_train(args) -> int:
    from .adapters import apply_adapters

    spec = _load_spec(args)
    model, vocab = spec.build(seed=args.seed)
    stages = []
    for cfg_path in args.stage_configs:
        path = Path(cfg_path)
        if not path.exists() and not path.suffix:
            path = builtin_config_path(cfg_path)
        stages.extend(load_stage_file(path))
    stages = [
        scale_stage(st, max_steps=args.max_steps, batch_size=args.batch_size)
        for st in stages
    ]
    dataset_ids = {ds for st in stages for ds, w in st.mixture if w > 0}
    datasets = load_dataset_dir(args.data_dir, dataset_ids)

    resume_meta = None
    resume_arrays = None
    if args.resume:
        arrays, meta = load_training_checkpoint(args.resume)
        if any(".adapter." in name for name in arrays) and not any(
            ".adapter." in n for n in model.params()
        ):
            apply_adapters(model, spec.adapter_config(), np.random.default_rng(args.seed + 7))
        load_model_arrays(model, {k: v for k, v in arrays.items() if not k.startswith("optimizer.")})
        resume_meta = meta
        resume_arrays = arrays

    out_dir = Path(args.out)
    final = None
    for stage in stages:
        if stage.freezing == "adapters" and not any(
            ".adapter." in n for n in model.params()
        ):
            apply_adapters(model, spec.adapter_config(), np.random.default_rng(args.seed + 7))
        resume = None
        if resume_meta and resume_meta.get("stage_name") == stage.name:
            from .training import CheckpointMeta

            resume = CheckpointMeta(
                stage_name=stage.name,
                step=resume_meta["step"],
                path=str(args.resume),
                sampler_state=resume_meta["sampler_state"],
                neftune_rng_state=resume_meta["neftune_rng_state"],
                optimizer_t=resume_meta["optimizer_t"],
            )
            if resume_meta["step"] >= stage.steps:
                continue
        final = run_stage(
            stage,
            model,
            datasets,
            vocab,
            seed=args.seed,
            out_dir=out_dir,
            metrics_path=args.metrics or out_dir / "metrics.csv",
            checkpoint_every=args.checkpoint_every,
            resume=resume,
            optimizer_arrays=resume_arrays if resume is not None else None,
        )
        print(f"stage {stage.name}: finished {stage.steps} steps -> {final.path}")
    if final is None:
        raise ValueError("no stages ran (all already complete in the resumed checkpoint)")
    return 0


def cmd_gen_data(args) -> int:
    if args.generator == "mock":
        generator = DeterministicMockGenerator()
    else:
        generator = HttpCompletionGenerator()
    templates = None
    if args.template_dir:
        from .docgen import PromptTemplate

        templates = []
        for i, path in enumerate(sorted(Path(args.template_dir).glob("*.txt")), start=1):
            templates.append(PromptTemplate(i, path.read_text(encoding="utf-8")))
        if not templates:
            raise ValueError(f"no *.txt templates in {args.template_dir}")
    summary, report = run_pipeline(
        args.transcripts,
        args.out,
        generator,
        shard_size=args.shard_size,
        seed=args.seed,
        templates=templates,
        report_path=args.report,
    )
    print(
        f"docgen: {summary['transcripts']} transcripts -> {report.kept} kept / "
        f"{report.total} pairs (drop {report.drop_fraction:.1%}), "
        f"{len(summary['manifest']['shards'])} shard(s)"
    )
    return 0


def make_model_runner(model: VLM, vocab: Vocabulary, max_new_tokens: int = 32):
    """Greedy generation runner for run_benchmark: tiles the (already
    resized) image, formats a one-turn chat, decodes with the stop words."""
    per_tile = None
    cross = model.fusion_cfg.mode == "cross_attention"
    if not cross:
        per_tile = model.tokens_per_tile()
    tile_cfg = TileConfig(
        tile_side=model.tile_side,
        max_long_side=model.tile_side * vocab.grid_max,
    )

    def runner(image, prompt: str) -> str:
        from .assembler import ImageRef

        segments: list = []
        grids = []
        if image is not None:
            grids = [split_into_tiles(image, tile_cfg)]
            segments.append(ImageRef(0))
        segments.append(prompt)
        turns = [ChatTurn("user", segments)]
        seq = build_training_sequence(
            turns, vocab, grids, per_tile_tokens=per_tile or 1, cross_attention=cross
        )
        seq.append_tokens(vocab.tokenize("Assistant: "), 0)
        stream = model.greedy_token_stream(seq, grids)
        return decode_with_stopwords(stream, vocab, max_tokens=max_new_tokens)

    return runner


def cmd_eval(args) -> int:
    spec = _load_spec(args)
    model, vocab = spec.build(seed=args.seed)
    arrays = load_arrays(args.checkpoint)
    if any(".adapter." in name for name in arrays):
        from .adapters import apply_adapters

        apply_adapters(model, spec.adapter_config(), np.random.default_rng(args.seed + 7))
    load_model_arrays(model, {k: v for k, v in arrays.items() if not k.startswith("optimizer.")})

    bench_path = Path(args.benchmark)
    if args.spec:
        bench_spec = BUILTIN_SPECS[args.spec]
    else:
        stem = bench_path.stem.lower()
        matches = [name for name in BUILTIN_SPECS if name in stem]
        if not matches:
            raise ValueError(
                f"cannot infer benchmark spec from {bench_path.name!r}; pass --spec"
            )
        bench_spec = BUILTIN_SPECS[matches[0]]
    if model.tile_side != bench_spec.tile_side:
        bench_spec = BenchmarkSpec(
            bench_spec.name,
            bench_spec.task_kind,
            bench_spec.prompt_template,
            (bench_spec.resize_longest // bench_spec.tile_side) * model.tile_side,
            bench_spec.metric,
            tile_side=model.tile_side,
        )
    examples = load_benchmark_file(bench_path)
    runner = make_model_runner(model, vocab, max_new_tokens=args.max_new_tokens)
    result = run_benchmark(
        bench_spec,
        examples,
        runner,
        resize_override=args.resize_override,
        per_example_path=args.per_example,
    )
    table = summary_table({bench_spec.name: result})
    print(table)
    if args.report:
        Path(args.report).write_text(
            json.dumps(
                {
                    "benchmark": bench_spec.name,
                    "metric": bench_spec.metric,
                    "count": result.count,
                    "errors": result.errors,
                    "aggregate": result.aggregate,
                },
                indent=1,
                sort_keys=True,
            ),
            encoding="utf-8",
        )
    return 0


def cmd_inspect(args) -> int:
    if args.checkpoint:
        arrays = load_arrays(args.checkpoint)
        total = 0
        for name in sorted(arrays):
            arr = arrays[name]
            print(f"{name:<48} {str(arr.shape):>16}")
            total += arr.size
        print(f"total parameters: {total}")
        return 0
    if not args.sequence:
        raise ValueError("inspect needs --sequence or --checkpoint")
    spec = _load_spec(args)
    vocab = spec.build_vocab()
    record = json.loads(Path(args.sequence).read_text(encoding="utf-8"))
    images, turns = parse_example_record(record)
    base = Path(args.sequence).parent
    cfg = TileConfig(tile_side=spec.tile_side, max_long_side=args.max_long_side or spec.tile_side * spec.grid_max)
    grids = []
    for im in images:
        img = read_image(base / im if not Path(im).is_absolute() else im)
        if max(img.height, img.width) > cfg.max_long_side:
            img = resize_longest_side(img, cfg.max_long_side)
        grids.append(split_into_tiles(img, cfg))
    g = spec.tile_side // spec.patch_side
    if spec.connector == "pixel_shuffle":
        per_tile = (g * g) // (spec.shuffle_factor**2)
    elif spec.connector == "perceiver":
        per_tile = spec.latent_count
    else:
        per_tile = g * g
    seq = build_training_sequence(turns, vocab, grids, per_tile_tokens=per_tile)
    print(render_sequence(seq, vocab))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tinyvlm",
        description="Desk-scale vision-language model kit: tile, train, generate data, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="tile images and write a grid manifest")
    p.add_argument("--input", nargs="+", required=True, help="image files or directories")
    p.add_argument("--out", required=True, help="output directory for tiles")
    p.add_argument("--tile-side", type=int, default=364)
    p.add_argument("--max-long-side", type=int, default=5 * 364)
    p.add_argument("--manifest", default=None, help="manifest path (default <out>/manifest.jsonl)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="run training stages in order")
    p.add_argument("stage_configs", nargs="+", help="stage config files (or builtin: table3, desk)")
    p.add_argument("--model-config", default=None)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-steps", type=int, default=None, help="desk-scale step override per stage")
    p.add_argument("--batch-size", type=int, default=None, help="batch size override")
    p.add_argument("--metrics", default=None, help="CSV metrics path")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gen-data", help="synthetic document-QA pipeline")
    p.add_argument("--transcripts", required=True, help="JSONL transcripts file")
    p.add_argument("--out", required=True, help="output shard directory")
    p.add_argument("--shard-size", type=int, default=1000)
    p.add_argument("--report", default=None, help="write the filter report JSON here")
    p.add_argument("--generator", choices=("mock", "http"), default="mock")
    p.add_argument("--template-dir", default=None, help="directory of *.txt prompt templates")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("eval", help="score a benchmark file with a checkpoint")
    p.add_argument("--benchmark", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--spec", choices=sorted(BUILTIN_SPECS), default=None)
    p.add_argument("--model-config", default=None)
    p.add_argument("--resize-override", type=int, default=None)
    p.add_argument("--report", default=None)
    p.add_argument("--per-example", default=None)
    p.add_argument("--max-new-tokens", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="render an example's sequence or list a checkpoint")
    p.add_argument("--sequence", default=None, help="training example JSON file")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--model-config", default=None)
    p.add_argument("--max-long-side", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles usage errors and --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
