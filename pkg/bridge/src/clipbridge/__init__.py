"""clipbridge: real-data on-ramp for the adapter pipeline.

Exports text and image embeddings from a vision-language encoder into the
``*.taie`` store format, and drives a JSON chat-completion endpoint through
the ``instructions.jsonl`` / ``responses.jsonl`` protocol. The only coupling
to the training pipeline is those file formats; no code is shared.
"""

__version__ = "0.1.0"
