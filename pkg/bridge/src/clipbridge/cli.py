"""Command-line surface for the bridge: embedding export and chat batch runs."""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click

from . import __version__
from .chat import ChatConfig, chat_generate
from .encoders import EncoderError, make_encoder
from .export import export_image_embeddings, export_text_embeddings
from .formats import FormatError, load_vocab


def _write_manifest(out_path, command: str, config: dict, report: dict) -> None:
    manifest = {"command": command, "config": config, "report": report, "tool_version": __version__}
    with open(str(out_path) + ".manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def _guard(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (EncoderError, FormatError, OSError, ValueError) as e:
        click.echo(f"error: {type(e).__name__}: {e}", err=True)
        sys.exit(1)


@click.group()
@click.version_option(__version__)
def main():
    """Encoder and chat-endpoint bridge for the adapter pipeline."""


@main.command("export-texts")
@click.option("--texts", "texts_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="texts.jsonl with {id, text, labels} lines.")
@click.option("--vocab", "vocab_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--encoder", "encoder_spec", default="palette:64", show_default=True,
              help="Backend spec: palette:<dim> or hf:<model-id>.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
def export_texts(texts_path, vocab_path, encoder_spec, out_path):
    """Encode labeled texts into a text .taie store."""
    started = time.monotonic()
    names = _guard(load_vocab, vocab_path)
    encoder = _guard(make_encoder, encoder_spec)
    report = _guard(export_text_embeddings, texts_path, names, encoder, out_path)
    _write_manifest(out_path, "export-texts", {
        "texts": str(texts_path), "vocab": str(vocab_path), "encoder": encoder.name,
        "dim": encoder.dim, "wall_time_s": time.monotonic() - started,
    }, {"exported": report.n_exported, "skipped": report.skipped})
    click.echo(f"exported {report.n_exported} text embeddings (d={encoder.dim}) to {out_path}; "
               f"skipped {len(report.skipped)}")


@main.command("export-images")
@click.option("--images", "images_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="images.jsonl manifest with {id, path, labels} lines.")
@click.option("--vocab", "vocab_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--encoder", "encoder_spec", default="palette:64", show_default=True)
@click.option("--resolution", type=click.Choice(["224", "448"]), default="224", show_default=True,
              help="Input resolution fed to the encoder.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
def export_images(images_path, vocab_path, encoder_spec, resolution, out_path):
    """Encode annotated images into an image .taie store."""
    started = time.monotonic()
    names = _guard(load_vocab, vocab_path)
    encoder = _guard(make_encoder, encoder_spec, resolution=int(resolution))
    report = _guard(export_image_embeddings, images_path, names, encoder, out_path)
    _write_manifest(out_path, "export-images", {
        "images": str(images_path), "vocab": str(vocab_path), "encoder": encoder.name,
        "dim": encoder.dim, "resolution": int(resolution),
        "wall_time_s": time.monotonic() - started,
    }, {"exported": report.n_exported, "skipped": report.skipped})
    click.echo(f"exported {report.n_exported} image embeddings (d={encoder.dim}, "
               f"res={resolution}) to {out_path}; skipped {len(report.skipped)}")


@main.command("chat-generate")
@click.option("--instructions", "instructions_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--endpoint", required=True, help="Chat completion base URL.")
@click.option("--model", required=True)
@click.option("--refinement-rounds", type=int, default=1, show_default=True)
@click.option("--max-attempts", type=int, default=5, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
def chat_generate_cmd(instructions_path, endpoint, model, refinement_rounds, max_attempts, out_path):
    """Drive a chat endpoint through the instruction file; resumable by id."""
    cfg = ChatConfig(endpoint_url=endpoint, model=model,
                     refinement_rounds=refinement_rounds, max_attempts=max_attempts)
    report = _guard(chat_generate, instructions_path, out_path, cfg)
    _write_manifest(out_path, "chat-generate", {
        "instructions": str(instructions_path), "endpoint": endpoint, "model": model,
        "refinement_rounds": refinement_rounds,
    }, {"completed": report.n_completed, "skipped_existing": report.n_skipped_existing,
        "failures": len(report.failures)})
    click.echo(f"completed {report.n_completed}, skipped {report.n_skipped_existing} existing, "
               f"{len(report.failures)} failures -> {out_path}")
    if report.failures and report.n_completed == 0:
        sys.exit(1)


if __name__ == "__main__":
    main()
