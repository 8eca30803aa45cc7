"""Command-line surface: data generation, training, inference, evaluation,
ensembling, and the radius-sweep ablation harness.

Every command validates its flags before writing anything, never mutates an
input file, and drops a ``<first-output>.manifest.json`` recording the
resolved configuration, input digests, and output paths. Re-running with a
manifest's config and inputs reproduces every data artifact (stores,
checkpoints, score files, reports) byte for byte; only wall-clock fields in
the manifest and the log summary differ. Failures exit nonzero with a single
``error: <kind>: <message>`` line on stderr.

Options can also come from a TOML file (``--config``) using the same keys as
the flags; explicit flags win.
"""

from __future__ import annotations

import csv
import dataclasses
import functools
import hashlib
import json
import time
from pathlib import Path

import click

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import __version__, adapter, dataio, metrics, perturb, textgen
from .numkit import RandomSource

# Independent draw streams per pipeline stage, all derived from --seed.
STREAM_TRAIN = 0
STREAM_MASK = 1
STREAM_SHOTS = 2

_KNOWN_ERRORS = (
    dataio.StoreError,
    dataio.InvalidConfigError,
    metrics.IdMismatchError,
    textgen.OrphanResponseError,
    OSError,
    ValueError,
)


def _fail(exc: BaseException) -> "SystemExit":
    msg = " ".join(str(exc).split())
    click.echo(f"error: {type(exc).__name__}: {msg}", err=True)
    return SystemExit(1)


def guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _KNOWN_ERRORS as e:
            raise _fail(e) from None

    return wrapper


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def _check_no_overwrite(inputs, outputs) -> None:
    resolved_in = {Path(p).resolve() for p in inputs}
    for out in outputs:
        if Path(out).resolve() in resolved_in:
            raise dataio.InvalidConfigError(f"refusing to overwrite input file {out}")


def write_manifest(command: str, config: dict, seed, inputs, outputs, started: float) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {str(p): _digest(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "wall_time_s": time.monotonic() - started,
        "tool_version": __version__,
    }
    path = Path(str(outputs[0]) + ".manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return path


def config_file_option(fn):
    return click.option(
        "--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
        help="TOML file with the same keys as the flags; explicit flags win.",
    )(fn)


def apply_config_file(ctx: click.Context, values: dict) -> dict:
    """Fill flag values from the TOML file for options left at their default.

    Flat top-level keys apply to any command; a ``[command]`` section takes
    precedence over flat keys.
    """
    path = values.pop("config_path", None)
    if not path:
        return values
    with open(path, "rb") as f:
        data = tomllib.load(f)
    section = data.get(ctx.command.name, {})
    if not isinstance(section, dict):
        raise dataio.InvalidConfigError(f"[{ctx.command.name}] in {path} must be a table")
    flat = {k: v for k, v in data.items() if not isinstance(v, dict)}
    merged = {**flat, **section}
    out = dict(values)
    for key, val in merged.items():
        pykey = key.replace("-", "_")
        if pykey not in values:
            raise dataio.InvalidConfigError(f"unknown config key {key!r} for command {ctx.command.name}")
        if ctx.get_parameter_source(pykey) == click.core.ParameterSource.DEFAULT:
            out[pykey] = val
    return out


def _load_store(path, vocab, expect_modality: str):
    records = dataio.read_store(path, vocab)
    header = dataio.read_store_header(path)
    if header.modality != expect_modality:
        raise dataio.HeaderError(
            f"{path}: expected a {expect_modality} store, found {header.modality}"
        )
    return records


def _parse_hidden(text: str | None) -> tuple[int, ...] | None:
    if text is None or text == "":
        return None
    try:
        dims = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise dataio.InvalidConfigError(f"--hidden must be comma-separated integers, got {text!r}") from None
    if any(h < 1 for h in dims):
        raise dataio.InvalidConfigError(f"hidden sizes must be >= 1, got {dims}")
    return dims


@click.group()
@click.version_option(__version__)
def main():
    """Label-recognition adapter trained on text embeddings, applied to images."""


# ---------------------------------------------------------------------------
# Data generation


@main.command()
@click.option("--labels", type=int, default=20, show_default=True, help="Vocabulary size N.")
@click.option("--dim", type=int, default=256, show_default=True, help="Embedding dimension d.")
@click.option("--texts", "n_texts", type=int, default=2000, show_default=True)
@click.option("--images", "n_images", type=int, default=1000, show_default=True)
@click.option("--gap-norm", type=float, default=5.0, show_default=True, help="Modality gap displacement norm.")
@click.option("--noise", type=float, default=1.0, show_default=True, help="Cluster noise sigma.")
@click.option("--max-labels", type=int, default=2, show_default=True, help="Max labels per sample.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@config_file_option
@click.pass_context
@guarded
def synth(ctx, **values):
    """Generate the synthetic bimodal benchmark (vocab + two stores)."""
    v = apply_config_file(ctx, values)
    started = time.monotonic()
    cfg = dataio.SynthConfig(
        n_labels=v["labels"], dim=v["dim"], n_texts=v["n_texts"], n_images=v["n_images"],
        gap_norm=v["gap_norm"], cluster_noise=v["noise"],
        max_labels_per_sample=v["max_labels"], seed=v["seed"],
    )
    bench = dataio.synth_benchmark(cfg)
    out_dir = Path(v["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab_path = out_dir / "vocab.json"
    texts_path = out_dir / "texts.taie"
    images_path = out_dir / "images.taie"
    bench.vocab.to_json_file(vocab_path)
    dataio.write_store(texts_path, bench.texts, bench.vocab, "text")
    dataio.write_store(images_path, bench.images, bench.vocab, "image")
    write_manifest("synth", v, v["seed"], [], [texts_path, vocab_path, images_path], started)
    click.echo(f"wrote {vocab_path}, {texts_path} ({cfg.n_texts} records), {images_path} ({cfg.n_images} records)")


@main.command("gen-prompt-texts")
@click.option("--vocab", "vocab_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--count", type=int, required=True)
@click.option("--min-k", type=int, default=1, show_default=True)
@click.option("--max-k", type=int, default=4, show_default=True)
@click.option("--template-index", type=int, default=None,
              help="Fix one prompt pattern; default draws one per sample.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@config_file_option
@click.pass_context
@guarded
def gen_prompt_texts(ctx, **values):
    """Render labeled training texts from fixed prompt patterns (no model)."""
    v = apply_config_file(ctx, values)
    started = time.monotonic()
    vocab = dataio.LabelVocab.from_json_file(v["vocab_path"])
    _check_no_overwrite([v["vocab_path"]], [v["out_path"]])
    rng = RandomSource(v["seed"])
    records = textgen.generate_prompt_texts(
        rng, vocab, v["count"], v["min_k"], v["max_k"], v["template_index"]
    )
    dataio.write_texts(v["out_path"], records)
    write_manifest("gen-prompt-texts", v, v["seed"], [v["vocab_path"]], [v["out_path"]], started)
    click.echo(f"wrote {len(records)} texts to {v['out_path']}")


@main.command("gen-instructions")
@click.option("--vocab", "vocab_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--count", type=int, required=True)
@click.option("--template", type=click.Choice(sorted(textgen.INSTRUCTION_TEMPLATES)),
              default="instruction_1", show_default=True)
@click.option("--min-k", type=int, default=1, show_default=True)
@click.option("--max-k", type=int, default=4, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@config_file_option
@click.pass_context
@guarded
def gen_instructions(ctx, **values):
    """Emit an instruction file for an external chat model."""
    v = apply_config_file(ctx, values)
    started = time.monotonic()
    vocab = dataio.LabelVocab.from_json_file(v["vocab_path"])
    _check_no_overwrite([v["vocab_path"]], [v["out_path"]])
    rng = RandomSource(v["seed"])
    records = textgen.emit_instructions(
        rng, vocab, v["count"], v["template"], v["min_k"], v["max_k"], v["out_path"]
    )
    write_manifest("gen-instructions", v, v["seed"], [v["vocab_path"]], [v["out_path"]], started)
    click.echo(f"wrote {len(records)} instructions to {v['out_path']}")


@main.command("ingest-responses")
@click.option("--instructions", "instructions_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--responses", "responses_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--max-chars", type=int, default=textgen.DEFAULT_MAX_RESPONSE_CHARS, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@config_file_option
@click.pass_context
@guarded
def ingest_responses(ctx, **values):
    """Join chat responses back to their instructions' label combinations."""
    v = apply_config_file(ctx, values)
    started = time.monotonic()
    inputs = [v["instructions_path"], v["responses_path"]]
    _check_no_overwrite(inputs, [v["out_path"]])
    records, report = textgen.ingest_responses(
        v["instructions_path"], v["responses_path"], v["max_chars"]
    )
    dataio.write_texts(v["out_path"], records)
    write_manifest("ingest-responses", v, None, inputs, [v["out_path"]], started)
    click.echo(
        f"ingested {report.n_ingested} texts to {v['out_path']} "
        f"(dropped too long: {report.n_dropped_too_long}, skipped empty: {report.n_skipped_empty})"
    )


# ---------------------------------------------------------------------------
# Training and inference


def _train_options(fn):
    for opt in reversed([
        click.option("--radius", type=float, default=25.0, show_default=True, help="Text noise radius."),
        click.option("--image-radius", type=float, default=1.0, show_default=True, help="Image noise radius (fsl)."),
        click.option("--shift-radius", type=float, default=10.0, show_default=True, help="Post-shift text radius (pll)."),
        click.option("--scheme", type=click.Choice(perturb.SCHEMES), default="surface", show_default=True),
        click.option("--epochs", type=int, default=60, show_default=True),
        click.option("--batch-size", type=int, default=64, show_default=True),
        click.option("--max-lr", type=float, default=1e-4, show_default=True),
        click.option("--weight-decay", type=float, default=0.01, show_default=True),
        click.option("--dropout", type=float, default=0.5, show_default=True),
        click.option("--hidden", type=str, default=None, help="Comma-separated hidden sizes; default d,d."),
        click.option("--seed", type=int, default=0, show_default=True),
        click.option("--literal-output", is_flag=True, help="Apply ReLU+dropout on the output layer too."),
    ]):
        fn = opt(fn)
    return fn


def _build_train_config(v, mode: str) -> adapter.TrainConfig:
    return adapter.TrainConfig(
        mode=mode,
        epochs=v["epochs"],
        batch_size=v["batch_size"],
        max_lr=v["max_lr"],
        dropout=v["dropout"],
        hidden=_parse_hidden(v["hidden"]),
        optimizer=adapter.OptimizerConfig(weight_decay=v["weight_decay"]),
        perturb=perturb.PerturbConfig(
            radius=v["radius"], image_radius=v["image_radius"],
            shift_radius=v["shift_radius"], scheme=v["scheme"],
        ),
        seed=v["seed"],
        literal_output_activation=v["literal_output"],
    )


@main.command()
@click.option("--texts", "texts_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Text embedding store (*.taie).")
@click.option("--vocab", "vocab_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--mode", type=click.Choice(adapter.MODES), default="zsl", show_default=True)
@click.option("--images", "images_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Image embedding store; required for fsl and pll.")
@click.option("--shots", type=int, default=None, help="fsl: images kept per label (seeded); default all.")
@click.option("--known-rate", type=float, default=None,
              help="pll: reveal each known label with this probability (seeded).")
@click.option("--pll-train-on-images", is_flag=True,
              help="pll extension: also feed images to the loss, masked to known labels.")
@_train_options
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--log", "log_path", type=click.Path(dir_okay=False), default=None,
              help="Training log path; default <out>.log.jsonl.")
@config_file_option
@click.pass_context
@guarded
def train(ctx, **values):
    """Train the adapter on a text store (plus images for fsl/pll)."""
    v = apply_config_file(ctx, values)
    started = time.monotonic()
    mode = v["mode"]
    if mode == "zsl":
        for flag in ("images_path", "shots", "known_rate"):
            if v[flag] is not None:
                raise dataio.InvalidConfigError(f"--{flag.replace('_', '-').removesuffix('-path')} is not valid in zsl mode")
    else:
        if v["images_path"] is None:
            raise dataio.InvalidConfigError(f"--images is required in {mode} mode")
    if v["shots"] is not None and mode != "fsl":
        raise dataio.InvalidConfigError("--shots is only valid in fsl mode")
    if v["known_rate"] is not None and mode != "pll":
        raise dataio.InvalidConfigError("--known-rate is only valid in pll mode")
    if v["pll_train_on_images"] and mode != "pll":
        raise dataio.InvalidConfigError("--pll-train-on-images is only valid in pll mode")

    log_path = v["log_path"] or f"{v['out_path']}.log.jsonl"
    inputs = [v["texts_path"], v["vocab_path"]] + ([v["images_path"]] if v["images_path"] else [])
    _check_no_overwrite(inputs, [v["out_path"], log_path])

    vocab = dataio.LabelVocab.from_json_file(v["vocab_path"])
    text_records = _load_store(v["texts_path"], vocab, "text")
    image_records = None
    if v["images_path"]:
        image_records = _load_store(v["images_path"], vocab, "image")
        if mode == "fsl" and v["shots"] is not None:
            image_records = dataio.select_shots(
                image_records, v["shots"], RandomSource(v["seed"], STREAM_SHOTS)
            )
        if mode == "pll" and v["known_rate"] is not None:
            image_records = dataio.mask_known_rate(
                image_records, v["known_rate"], RandomSource(v["seed"], STREAM_MASK)
            )

    cfg = _build_train_config(v, mode)
    if v["pll_train_on_images"]:
        cfg = dataclasses.replace(cfg, pll_train_on_images=True)
    result = adapter.train(text_records, vocab, cfg, image_records)
    dataio.save_checkpoint(v["out_path"], result.checkpoint)
    with open(log_path, "w", encoding="utf-8") as f:
        for entry in result.log:
            f.write(json.dumps(entry) + "\n")
        f.write(json.dumps({"summary": result.summary}) + "\n")
    write_manifest("train", v, v["seed"], inputs, [v["out_path"], log_path], started)
    click.echo(
        f"trained {mode} adapter ({result.summary['param_count']} params, "
        f"{result.summary['steps']} steps) -> {v['out_path']}"
    )


@main.command("estimate-centroids")
@click.option("--texts", "texts_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--images", "images_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--vocab", "vocab_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@config_file_option
@click.pass_context
@guarded
def estimate_centroids(ctx, **values):
    """Estimate visual/text centroids and combination offsets."""
    v = apply_config_file(ctx, values)
    started = time.monotonic()
    inputs = [v["texts_path"], v["images_path"], v["vocab_path"]]
    _check_no_overwrite(inputs, [v["out_path"]])
    vocab = dataio.LabelVocab.from_json_file(v["vocab_path"])
    texts = _load_store(v["texts_path"], vocab, "text")
    images = _load_store(v["images_path"], vocab, "image")
    table = perturb.estimate_table(texts, images, vocab)
    perturb.save_centroid_table(v["out_path"], table)
    write_manifest("estimate-centroids", v, None, inputs, [v["out_path"]], started)
    click.echo(
        f"wrote {len(table.visual)} visual centroids and {len(table.text)} "
        f"combination centroids to {v['out_path']}"
    )


@main.command()
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--store", "store_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--vocab", "vocab_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--literal-output", is_flag=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@config_file_option
@click.pass_context
@guarded
def predict(ctx, **values):
    """Score every record in a store with a trained adapter."""
    v = apply_config_file(ctx, values)
    started = time.monotonic()
    inputs = [v["model_path"], v["store_path"], v["vocab_path"]]
    _check_no_overwrite(inputs, [v["out_path"]])
    vocab = dataio.LabelVocab.from_json_file(v["vocab_path"])
    ckpt = dataio.load_checkpoint(v["model_path"], vocab)
    records = dataio.read_store(v["store_path"], vocab)
    scored = adapter.predict(ckpt, records, vocab, literal_output=v["literal_output"])
    dataio.write_scores(v["out_path"], scored)
    write_manifest("predict", v, None, inputs, [v["out_path"]], started)
    click.echo(f"wrote {len(scored)} score rows to {v['out_path']}")


@main.command("eval")
@click.option("--scores", "scores_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--truth", "truth_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Embedding store carrying the ground-truth annotations.")
@click.option("--vocab", "vocab_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--per-label", is_flag=True, help="Include the full per-label AP table.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@config_file_option
@click.pass_context
@guarded
def eval_cmd(ctx, **values):
    """Mean average precision of a score file against a truth store."""
    v = apply_config_file(ctx, values)
    started = time.monotonic()
    inputs = [v["scores_path"], v["truth_path"], v["vocab_path"]]
    _check_no_overwrite(inputs, [v["out_path"]])
    vocab = dataio.LabelVocab.from_json_file(v["vocab_path"])
    truth = dataio.read_store(v["truth_path"], vocab)
    scored = dataio.read_scores(v["scores_path"], n_labels=len(vocab))
    report = metrics.mean_ap(scored, truth, config={"scores": v["scores_path"], "truth": v["truth_path"]})
    report.to_json(v["out_path"], include_per_label=v["per_label"])
    write_manifest("eval", v, None, inputs, [v["out_path"]], started)
    click.echo(f"mAP {report.map:.4f} over {report.n_samples} samples -> {v['out_path']}")


@main.command()
@click.option("--a", "a_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--b", "b_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--per-file-scaling", is_flag=True, help="Min-max scale per file instead of per label.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@config_file_option
@click.pass_context
@guarded
def ensemble(ctx, **values):
    """Average two score files after min-max scaling each to [0, 1]."""
    v = apply_config_file(ctx, values)
    started = time.monotonic()
    inputs = [v["a_path"], v["b_path"]]
    _check_no_overwrite(inputs, [v["out_path"]])
    a = dataio.read_scores(v["a_path"])
    b = dataio.read_scores(v["b_path"])
    merged = metrics.ensemble_scores(a, b, per_file=v["per_file_scaling"])
    dataio.write_scores(v["out_path"], merged)
    write_manifest("ensemble", v, None, inputs, [v["out_path"]], started)
    click.echo(f"wrote ensembled scores for {len(merged)} rows to {v['out_path']}")


@main.command("sweep-radius")
@click.option("--texts", "texts_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--images", "images_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Image store used for the image-side mAP of each radius.")
@click.option("--vocab", "vocab_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--radii", type=str, default="0,1,2,5,10,25", show_default=True)
@_train_options
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@config_file_option
@click.pass_context
@guarded
def sweep_radius(ctx, **values):
    """Train at each radius and emit radius,map CSV (image-side mAP)."""
    v = apply_config_file(ctx, values)
    started = time.monotonic()
    inputs = [v["texts_path"], v["images_path"], v["vocab_path"]]
    _check_no_overwrite(inputs, [v["out_path"]])
    try:
        radii = [float(r) for r in str(v["radii"]).split(",")]
    except ValueError:
        raise dataio.InvalidConfigError(f"--radii must be comma-separated numbers, got {v['radii']!r}") from None
    vocab = dataio.LabelVocab.from_json_file(v["vocab_path"])
    texts = _load_store(v["texts_path"], vocab, "text")
    images = _load_store(v["images_path"], vocab, "image")
    rows = []
    for r in radii:
        cfg = _build_train_config({**v, "radius": r}, "zsl")
        result = adapter.train(texts, vocab, cfg)
        scored = adapter.predict(result.checkpoint, images, vocab)
        report = metrics.mean_ap(scored, images)
        rows.append((r, report.map))
        click.echo(f"radius {r:g}: image-side mAP {report.map:.4f}")
    with open(v["out_path"], "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["radius", "map"])
        writer.writerows(rows)
    write_manifest("sweep-radius", v, v["seed"], inputs, [v["out_path"]], started)


if __name__ == "__main__":
    main()
