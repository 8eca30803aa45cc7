"""Batch client for a JSON chat-completion endpoint.

Walks an ``instructions.jsonl`` file and writes one ``{id, text}`` response
line per instruction. Each instruction runs as one conversation: the
instruction itself, then ``refinement_rounds`` applications of the preset
refinement instructions carried in the file's metadata (ask for a different
caption, then ask to shorten). Rate limits and transient server errors are
retried with exponential backoff; permanent failures are recorded per id in
a ``.failures.jsonl`` sidecar. Output files are valid after interruption and
runs resume by skipping ids already present.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field

import httpx

from .formats import read_instructions_jsonl

logger = logging.getLogger(__name__)

RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})


@dataclass(frozen=True)
class ChatConfig:
    endpoint_url: str  # base URL; POSTs to {endpoint_url}/chat/completions
    model: str
    refinement_rounds: int = 1
    max_attempts: int = 5
    backoff_base_s: float = 0.5
    backoff_cap_s: float = 30.0
    timeout_s: float = 60.0
    api_key_env: str = "CHAT_API_KEY"
    temperature: float | None = None

    def headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers


@dataclass
class ChatReport:
    n_completed: int = 0
    n_skipped_existing: int = 0
    failures: list[dict] = field(default_factory=list)


class ChatEndpointError(RuntimeError):
    pass


def _completion(client: httpx.Client, cfg: ChatConfig, messages: list[dict], sleep=time.sleep) -> str:
    """One chat call with bounded retry/backoff on retryable statuses."""
    payload: dict = {"model": cfg.model, "messages": messages}
    if cfg.temperature is not None:
        payload["temperature"] = cfg.temperature
    url = cfg.endpoint_url.rstrip("/") + "/chat/completions"
    last_error = "no attempt made"
    for attempt in range(cfg.max_attempts):
        if attempt:
            sleep(min(cfg.backoff_base_s * 2 ** (attempt - 1), cfg.backoff_cap_s))
        try:
            resp = client.post(url, json=payload, headers=cfg.headers(), timeout=cfg.timeout_s)
        except httpx.HTTPError as e:
            last_error = f"transport error: {e}"
            logger.warning("attempt %d failed: %s", attempt + 1, last_error)
            continue
        if resp.status_code in RETRYABLE_STATUS:
            last_error = f"retryable status {resp.status_code}"
            logger.warning("attempt %d got %d, backing off", attempt + 1, resp.status_code)
            continue
        if resp.status_code != 200:
            raise ChatEndpointError(f"status {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, ValueError) as e:
            raise ChatEndpointError(f"malformed completion payload: {e}") from None
    raise ChatEndpointError(f"gave up after {cfg.max_attempts} attempts ({last_error})")


def _converse(client: httpx.Client, cfg: ChatConfig, instruction: str, refinements: list[str], sleep) -> str:
    messages = [{"role": "user", "content": instruction}]
    text = _completion(client, cfg, messages, sleep)
    for _ in range(cfg.refinement_rounds):
        for refinement in refinements:
            messages.append({"role": "assistant", "content": text})
            messages.append({"role": "user", "content": refinement})
            text = _completion(client, cfg, messages, sleep)
    return text


def _existing_ids(path) -> set[str]:
    ids: set[str] = set()
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line:
                    ids.add(str(json.loads(line)["id"]))
    except FileNotFoundError:
        pass
    return ids


def chat_generate(
    instructions_path,
    out_path,
    cfg: ChatConfig,
    transport: httpx.BaseTransport | None = None,
    sleep=time.sleep,
) -> ChatReport:
    """Generate a response for every instruction not already in the output.

    ``transport`` is injectable for testing; responses are appended one line
    per completed id, so a crashed run leaves a valid, resumable file.
    """
    meta, instructions = read_instructions_jsonl(instructions_path)
    refinements = [str(r) for r in meta.get("refinement_instructions", [])]
    done = _existing_ids(out_path)
    failures_path = str(out_path) + ".failures.jsonl"
    report = ChatReport()
    failures = None
    try:
        with httpx.Client(transport=transport) as client, open(out_path, "a", encoding="utf-8") as out:
            for record in instructions:
                rid = str(record["id"])
                if rid in done:
                    report.n_skipped_existing += 1
                    continue
                try:
                    text = _converse(client, cfg, str(record["instruction"]), refinements, sleep)
                except ChatEndpointError as e:
                    entry = {"id": rid, "error": str(e)}
                    report.failures.append(entry)
                    if failures is None:
                        failures = open(failures_path, "a", encoding="utf-8")
                    failures.write(json.dumps(entry) + "\n")
                    failures.flush()
                    continue
                out.write(json.dumps({"id": rid, "text": text}, ensure_ascii=False) + "\n")
                out.flush()
                report.n_completed += 1
    finally:
        if failures is not None:
            failures.close()
    return report
