"""Knowledge elements (KEs): short visual-attribute phrases tied to a caption.

Two sources produce them: a deterministic oracle that reads the synthetic
corpus captions (so the pipeline runs offline), and a client for an external
LLM completion endpoint for arbitrary captions. Either way the output is a
flat list of strings; ranking against image patches picks the ones a given
image actually supports.
"""

import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data

CATEGORY_PROMPT = (
    "What are useful visual features for distinguishing a {category_name} in a photo?"
)

CAPTION_PROMPT = """\
Given an image caption, extract a list of distinct, low-level visual attributes \
or sub-object elements present in the image. The goal is to identify specific \
visual properties or components that may characterize the depicted scene. \
Please generate at least 4-5 descriptive elements that could be associated with \
the visual content in the image.

Example Caption: A golden retriever playing fetch on a green field under the sun.
Expected Output:
Golden fur, Fetching object (ball/stick), Green grass, Bright sunlight, Sharp teeth/paws

Example Caption: A man in hitting a ball with a baseball bat.
Example Output: White ball with red stitching, Wooden bat, Man wearing a helmet, Green grass/ Infield dirt

Example Caption: {caption}
Example Output: """

ENV_URL = "SHIELD_LLM_URL"
ENV_KEY = "SHIELD_LLM_KEY"


class KEError(RuntimeError):
    """LLM transport or response-format failure; carries the raw text if any."""

    def __init__(self, message, raw=None):
        super().__init__(message)
        self.raw = raw


@dataclass(frozen=True)
class KERequest:
    """One KE-generation call: a caption or a category name plus a count."""

    caption: str
    category_name: str | None = None
    count_requested: int = 25
    prompt_kind: str = "caption"

    def __post_init__(self):
        if self.prompt_kind not in ("category", "caption"):
            raise ValueError(f"unknown prompt_kind {self.prompt_kind!r}")
        if self.count_requested < 5:
            raise ValueError(f"count_requested must be >= 5, got {self.count_requested}")
        if self.prompt_kind == "category" and not self.category_name:
            raise ValueError("category prompt needs a category_name")

    def prompt(self):
        if self.prompt_kind == "category":
            return CATEGORY_PROMPT.format(category_name=self.category_name)
        return CAPTION_PROMPT.format(caption=self.caption)

    def cache_text(self):
        return self.category_name if self.prompt_kind == "category" else self.caption


# ---------------------------------------------------------------------------
# deterministic oracle over the synthetic corpus


def oracle_kes(sample):
    """Rebuild a synthetic sample's KE list from its caption alone.

    The caption grammar is fixed ("a {color} {shape} on a {background}
    background ..."), so the attributes it states determine the list.
    """
    tokens = sample.caption.split()
    if len(tokens) < 7 or tokens[0] != "a" or tokens[3] != "on":
        raise ValueError(f"caption does not follow the corpus grammar: {sample.caption!r}")
    color, shape, background = tokens[1], tokens[2], tokens[5]
    kes = list(data.category_kes(shape, color))
    kes.append(f"{background} background texture")
    if " with a small " in sample.caption:
        tail = sample.caption.split(" with a small ", 1)[1].split()
        kes.append(f"small {tail[0]} accent shape")
    return kes


# ---------------------------------------------------------------------------
# LLM client


def parse_ke_response(text):
    """Comma/newline-separated phrases -> trimmed, exact-deduplicated list."""
    parts = []
    for line in text.replace(",", "\n").split("\n"):
        item = line.strip()
        if item and item not in parts:
            parts.append(item)
    return parts


def _http_transport(url, payload, headers, timeout):
    import requests

    resp = requests.post(url, json=payload, headers=headers, timeout=timeout)
    resp.raise_for_status()
    return resp.json()


@dataclass
class LLMClient:
    """Thin client for a JSON completion endpoint, with a JSONL result cache.

    POST {base_url} with {"model", "prompt", "max_tokens"}; the response must
    carry the completion under "text". Credentials come from the
    SHIELD_LLM_URL / SHIELD_LLM_KEY environment variables unless given.
    """

    base_url: str | None = None
    api_key: str | None = None
    model: str = "vicuna-13b"
    timeout: float = 30.0
    max_retries: int = 3
    backoff: float = 0.5
    cache_path: Path | None = None
    transport: callable = _http_transport

    def __post_init__(self):
        if self.base_url is None:
            self.base_url = os.environ.get(ENV_URL)
        if self.api_key is None:
            self.api_key = os.environ.get(ENV_KEY)
        self._lock = threading.Lock()
        self._cache = {}
        if self.cache_path is not None:
            self.cache_path = Path(self.cache_path)
            if self.cache_path.exists():
                with open(self.cache_path, encoding="utf-8") as fh:
                    for line in fh:
                        rec = json.loads(line)
                        key = (rec["prompt_kind"], rec["text"], rec["model"])
                        self._cache[key] = rec["response"]

    def complete(self, request):
        """Raw completion text for a KERequest; cached calls skip transport."""
        key = (request.prompt_kind, request.cache_text(), self.model)
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        if not self.base_url:
            raise KEError(f"no LLM endpoint configured (set {ENV_URL}) and no cached result")
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {
            "model": self.model,
            "prompt": request.prompt(),
            "max_tokens": 16 * request.count_requested,
        }
        last = None
        for attempt in range(self.max_retries):
            try:
                result = self.transport(self.base_url, payload, headers, self.timeout)
                break
            except Exception as exc:
                last = exc
                if attempt + 1 < self.max_retries:
                    time.sleep(self.backoff * (2 ** attempt))
        else:
            raise KEError(f"LLM request failed after {self.max_retries} attempts: {last}")
        if not isinstance(result, dict) or "text" not in result:
            raise KEError("LLM response lacks a 'text' field", raw=repr(result))
        text = result["text"]
        with self._lock:
            self._cache[key] = text
            if self.cache_path is not None:
                rec = {"prompt_kind": key[0], "text": key[1], "model": key[2],
                       "response": text}
                with open(self.cache_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return text


def llm_kes(request, client):
    """KE strings for one request; raises KEError when nothing parses."""
    raw = client.complete(request)
    kes = parse_ke_response(raw)
    if not kes:
        raise KEError("LLM returned no parseable knowledge elements", raw=raw)
    return kes


def llm_kes_many(requests_, client, max_workers=4):
    """Concurrent llm_kes over many requests, order-preserving."""
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(lambda r: llm_kes(r, client), requests_))


# ---------------------------------------------------------------------------
# ranking and tables


def select_top_kes(image_patches, candidates, text_encoder, k=5):
    """The k candidates whose embeddings best match some image patch.

    Scores each candidate by its maximum dot product over patches; ties and
    order are stable by candidate index. k beyond len(candidates) returns all.
    """
    if not candidates:
        raise ValueError("candidates must be non-empty")
    encode = getattr(text_encoder, "encode_kes", text_encoder)
    emb = np.asarray(encode(list(candidates)), dtype=np.float64)
    patches = np.asarray(image_patches, dtype=np.float64)
    scores = (patches @ emb.T).max(axis=0)
    order = np.argsort(-scores, kind="stable")
    return [candidates[i] for i in order[:k]]


@dataclass
class KETable:
    """KE strings and their unit-norm embeddings, keyed by category or sample id."""

    kes: dict = field(default_factory=dict)
    embeddings: dict = field(default_factory=dict)

    def __post_init__(self):
        for key, rows in self.embeddings.items():
            if len(self.kes[key]) < 1:
                raise ValueError(f"entry {key!r} has no KEs")
            norms = np.linalg.norm(np.asarray(rows), axis=-1)
            if not np.allclose(norms, 1.0, atol=1e-4):
                raise ValueError(f"entry {key!r} embeddings are not unit-norm")

    def resolve(self, sample):
        """(kes, embeddings) for a sample: per-sample entry first, then category."""
        if sample.id in self.kes:
            return self.kes[sample.id], self.embeddings[sample.id]
        return self.kes[sample.category_id], self.embeddings[sample.category_id]


def ke_strings(samples, per_sample=False, ke_count=None):
    """KE strings per entry: each sample's own list, or per category the
    strings common to every sample of that category. ke_count keeps the
    first k strings of each entry."""
    if per_sample:
        groups = {s.id: list(s.kes) for s in samples}
    else:
        groups = {}
        for s in samples:
            if s.category_id in groups:
                groups[s.category_id] = [k for k in groups[s.category_id] if k in s.kes]
            else:
                groups[s.category_id] = list(s.kes)
    for key, kes in groups.items():
        if not kes:
            raise ValueError(f"entry {key!r} has no KEs")
        if ke_count is not None:
            groups[key] = kes[:ke_count]
    return groups


def build_ke_table(samples, encode_fn, per_sample=False, ke_count=None):
    """Encode each entry's KE strings with a (frozen) text encoder.

    Callers wanting image-aware ranking reorder via select_top_kes before
    building.
    """
    table = KETable()
    for key, kes in ke_strings(samples, per_sample, ke_count).items():
        table.kes[key] = kes
        table.embeddings[key] = np.asarray(encode_fn(kes), dtype=np.float32)
    return table
