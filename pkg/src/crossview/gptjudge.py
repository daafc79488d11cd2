"""Two-stage multimodal LLM judging of synthesized street-view panoramas.

Stage A (the evaluator) scores a generated panorama against its ground truth
on three 1-5 dimensions and gives reasons.  Stage B (the inspector) sees the
same images plus A's card and either keeps it or re-scores.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np
from PIL import Image as PILImage

from .core import Image

log = logging.getLogger(__name__)

DIMENSIONS = ("consistency", "visual_realism", "perceptual_quality")
SCORE_MIN, SCORE_MAX = 1, 5
EVALUATOR_ROLE = "Evaluator A"
INSPECTOR_ROLE = "Inspector B"
STAGE_A = "EvaluatorA"
STAGE_B = "InspectorB"


class ParseError(ValueError):
    pass


class RangeError(ParseError):
    pass


class TransportError(RuntimeError):
    pass


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ICLExample:
    """A human-scored reference pair shown to the judge."""

    pair_id: str
    scores: dict
    reasons: dict
    total: int | None = None
    pred: Image | None = None
    gt: Image | None = None


DEFAULT_CRITERIA = {
    "consistency": (
        "How well the generated panorama matches the real one in content: building "
        "shapes and facades, road layout, vegetation and other landmarks in the same places."
    ),
    "visual_realism": (
        "Whether the generated panorama looks like a photograph of a real street: plausible "
        "colors, materials and textures, and geometrically sound structures."
    ),
    "perceptual_quality": (
        "Overall image quality: sharpness, absence of noise and artifacts, and how comfortable "
        "the image is to look at."
    ),
}

DEFAULT_TASK = (
    "You are grading street-view panoramas synthesized from satellite imagery. For each item "
    "you receive the generated panorama and the real panorama captured at the same location. "
    "Judge the generated image only; the real image is the reference."
)


@dataclass(frozen=True)
class Rubric:
    task: str = DEFAULT_TASK
    criteria: dict = field(default_factory=lambda: dict(DEFAULT_CRITERIA))
    examples: tuple = ()

    def __post_init__(self):
        if tuple(self.criteria) != DIMENSIONS:
            raise ValueError(f"rubric must define exactly {DIMENSIONS}")
        for ex in self.examples:
            _validate_scores(ex.scores)


@dataclass(frozen=True)
class ScoreCard:
    consistency: int
    visual_realism: int
    perceptual_quality: int
    total: int
    reasons: dict = field(default_factory=dict)
    stage: str = STAGE_A
    overridden: bool = False

    def __post_init__(self):
        _validate_scores(self.scores())
        if self.stage not in (STAGE_A, STAGE_B):
            raise ValueError(f"unknown stage {self.stage!r}")

    def scores(self) -> dict:
        return {d: getattr(self, d) for d in DIMENSIONS}

    def as_dict(self) -> dict:
        return asdict(self)


def _validate_scores(scores: dict) -> None:
    for d in DIMENSIONS:
        v = scores.get(d)
        if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
            raise ParseError(f"score {d!r} must be an integer, got {v!r}")
        if not SCORE_MIN <= v <= SCORE_MAX:
            raise RangeError(f"score {d!r}={v} outside {SCORE_MIN}..{SCORE_MAX}")


def image_data_url(img: Image) -> str:
    arr = np.rint(img.pixels * 255).astype(np.uint8)
    pil = PILImage.fromarray(arr[:, :, 0] if img.channels == 1 else arr)
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


def _text(s: str) -> dict:
    return {"type": "text", "text": s}


def _image(img: Image) -> dict:
    return {"type": "image_url", "image_url": {"url": image_data_url(img)}}


RESPONSE_FORMAT = (
    "Respond with exactly one JSON object and nothing else, of the form "
    '{"consistency": <int 1-5>, "visual_realism": <int 1-5>, "perceptual_quality": <int 1-5>, '
    '"total": <int>, "reasons": {"consistency": "...", "visual_realism": "...", '
    '"perceptual_quality": "..."}}. Explain each score in its reason before settling on it.'
)


def _example_block(k: int, ex: ICLExample) -> list[dict]:
    lines = [f"### Example {k} (pair {ex.pair_id})"]
    for d in DIMENSIONS:
        lines.append(f"- {d}: {ex.scores[d]} because {ex.reasons.get(d, '').strip()}")
    if ex.total is not None:
        lines.append(f"- total: {ex.total}")
    parts = [_text("\n".join(lines))]
    if ex.pred is not None and ex.gt is not None:
        parts += [_text("Generated:"), _image(ex.pred), _text("Real:"), _image(ex.gt)]
    return parts


def build_evaluator_prompt(rubric: Rubric, pred: Image, gt: Image) -> list[dict]:
    """Chat messages for stage A.

    The user message holds, in order: task, criteria, range, scored examples,
    the image pair and the response-format instruction.
    """
    criteria = "\n".join(f"- {d}: {rubric.criteria[d]}" for d in DIMENSIONS)
    parts = [
        _text("## Task\n" + rubric.task),
        _text("## Scoring criteria\n" + criteria),
        _text(
            f"## Scoring range\nIntegers from {SCORE_MIN} (poor) to {SCORE_MAX} (excellent) "
            "for every dimension."
        ),
        _text(f"## Scoring examples\n{len(rubric.examples)} human-scored example(s) follow."),
    ]
    for k, ex in enumerate(rubric.examples, 1):
        parts += _example_block(k, ex)
    parts += [
        _text("## Item to score\nGenerated panorama:"),
        _image(pred),
        _text("Real panorama:"),
        _image(gt),
        _text("## Response format\n" + RESPONSE_FORMAT),
    ]
    return [
        {"role": "system", "content": f"You act as {EVALUATOR_ROLE}, a careful image quality judge."},
        {"role": "user", "content": parts},
    ]


INSPECTOR_FORMAT = (
    'If the scores are reasonable respond with exactly {"decision": "keep"}. Otherwise respond '
    'with {"decision": "rescore", "consistency": <int 1-5>, "visual_realism": <int 1-5>, '
    '"perceptual_quality": <int 1-5>, "total": <int>, "reasons": {...}}. JSON only.'
)


def build_inspector_prompt(rubric: Rubric, pred: Image, gt: Image, card: ScoreCard) -> list[dict]:
    criteria = "\n".join(f"- {d}: {rubric.criteria[d]}" for d in DIMENSIONS)
    verdict = json.dumps(
        {**card.scores(), "total": card.total, "reasons": card.reasons}, sort_keys=True
    )
    parts = [
        _text("## Task\n" + rubric.task),
        _text("## Scoring criteria\n" + criteria),
        _text(f"## Scores from {EVALUATOR_ROLE}\n{verdict}"),
        _text("Are these scores reasonable for the images below? Keep them or re-score."),
        _text("Generated panorama:"),
        _image(pred),
        _text("Real panorama:"),
        _image(gt),
        _text("## Response format\n" + INSPECTOR_FORMAT),
    ]
    return [
        {"role": "system", "content": f"You act as {INSPECTOR_ROLE}, reviewing another judge's scores."},
        {"role": "user", "content": parts},
    ]


def _first_json_object(text: str) -> dict:
    decoder = json.JSONDecoder()
    start = text.find("{")
    while start != -1:
        try:
            obj, _ = decoder.raw_decode(text, start)
        except json.JSONDecodeError:
            start = text.find("{", start + 1)
            continue
        if isinstance(obj, dict):
            return obj
        start = text.find("{", start + 1)
    raise ParseError("no JSON object in response")


def _card_from_obj(obj: dict, stage: str, overridden: bool = False) -> ScoreCard:
    missing = [d for d in DIMENSIONS if d not in obj]
    if missing:
        raise ParseError(f"response lacks keys {missing}")
    scores = {d: obj[d] for d in DIMENSIONS}
    _validate_scores(scores)
    total = obj.get("total")
    if total is None:
        total = sum(scores.values())
    elif isinstance(total, bool) or not isinstance(total, int):
        raise ParseError(f"total must be an integer, got {total!r}")
    reasons = obj.get("reasons", {})
    if isinstance(reasons, str):
        reasons = {"overall": reasons}
    if not isinstance(reasons, dict):
        raise ParseError("reasons must be an object or a string")
    return ScoreCard(**scores, total=total, reasons=reasons, stage=stage, overridden=overridden)


def parse_scorecard(text: str, stage: str = STAGE_A) -> ScoreCard:
    """Score card from the first JSON object embedded in ``text``."""
    return _card_from_obj(_first_json_object(text or ""), stage)


def parse_inspection(text: str) -> ScoreCard | None:
    """``None`` for a keep verdict, otherwise the inspector's own card."""
    obj = _first_json_object(text or "")
    decision = str(obj.get("decision", "")).lower()
    if decision == "keep":
        return None
    if decision != "rescore":
        raise ParseError(f"unknown inspector decision {obj.get('decision')!r}")
    return _card_from_obj(obj, STAGE_B)


class ChatTransport(Protocol):
    def send(self, messages: list[dict]) -> str: ...


def messages_digest(messages: list[dict]) -> str:
    return hashlib.sha256(json.dumps(messages, sort_keys=True).encode()).hexdigest()


def _hash_scores(digest: str) -> dict:
    raw = bytes.fromhex(digest)
    return {d: SCORE_MIN + raw[i] % (SCORE_MAX - SCORE_MIN + 1) for i, d in enumerate(DIMENSIONS)}


Responder = str | Sequence[str] | Callable[[list[dict]], str]


class MockTransport:
    """Deterministic stand-in for a chat endpoint.

    ``evaluator`` / ``inspector`` may each be a fixed reply, a sequence of
    replies consumed in order (the last one repeats), or a callable of the
    messages.  Unset evaluator replies are derived from the message hash;
    the unset inspector always keeps.
    """

    def __init__(self, evaluator: Responder | None = None, inspector: Responder | None = None):
        self._responders = {STAGE_A: evaluator, STAGE_B: inspector}
        self._counts = {STAGE_A: 0, STAGE_B: 0}
        self.calls: list[tuple[str, str]] = []
        self._lock = threading.Lock()

    @staticmethod
    def stage_of(messages: list[dict]) -> str:
        return STAGE_B if INSPECTOR_ROLE in messages[0]["content"] else STAGE_A

    def send(self, messages: list[dict]) -> str:
        stage = self.stage_of(messages)
        digest = messages_digest(messages)
        with self._lock:
            self.calls.append((stage, digest))
            k = self._counts[stage]
            self._counts[stage] += 1
        r = self._responders[stage]
        if r is None:
            if stage == STAGE_B:
                return '{"decision": "keep"}'
            scores = _hash_scores(digest)
            reasons = {d: f"mock reason {digest[:8]}" for d in DIMENSIONS}
            return json.dumps({**scores, "total": sum(scores.values()), "reasons": reasons})
        if callable(r):
            return r(messages)
        if isinstance(r, str):
            return r
        return r[min(k, len(r) - 1)]


class HTTPTransport:
    """OpenAI-compatible ``/chat/completions`` client."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str | None = None,
        api_key_env: str = "CROSSVIEW_JUDGE_API_KEY",
        temperature: float | None = 0.0,
        timeout: float = 60.0,
        client=None,
    ):
        import httpx

        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.temperature = temperature
        key = api_key if api_key is not None else os.environ.get(api_key_env)
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._httpx = httpx
        self._client = client or httpx.Client(timeout=timeout)
        self._headers = headers

    def payload(self, messages: list[dict]) -> dict:
        body = {"model": self.model, "messages": messages}
        if self.temperature is not None:
            body["temperature"] = self.temperature
        return body

    def send(self, messages: list[dict]) -> str:
        url = self.endpoint + "/chat/completions"
        try:
            resp = self._client.post(url, json=self.payload(messages), headers=self._headers)
            resp.raise_for_status()
            data = resp.json()
        except (self._httpx.HTTPError, ValueError) as exc:
            raise TransportError(f"chat request to {url} failed: {exc}") from exc
        try:
            return data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unexpected response shape from {url}") from exc


def _ask(transport, messages, parse, retries, backoff, sleep):
    last_parse = None
    for attempt in range(retries):
        try:
            text = transport.send(messages)
        except TransportError:
            if attempt + 1 == retries:
                raise
            sleep(backoff * 2**attempt)
            continue
        try:
            return parse(text)
        except ParseError as exc:
            last_parse = exc
            log.warning("unparseable judge reply (attempt %d/%d): %s", attempt + 1, retries, exc)
    raise last_parse


def run_two_stage(
    transport: ChatTransport,
    rubric: Rubric,
    pred: Image,
    gt: Image,
    retries: int = 2,
    backoff: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
    with_first_stage: bool = False,
):
    """Final inspector-stage card for one generated/real pair.

    ``retries`` is the number of attempts per stage.  With
    ``with_first_stage`` the evaluator's card is returned too.
    """
    if retries < 1:
        raise ValueError("retries must be >= 1")
    first = _ask(transport, build_evaluator_prompt(rubric, pred, gt), parse_scorecard, retries, backoff, sleep)
    verdict = _ask(
        transport, build_inspector_prompt(rubric, pred, gt, first), parse_inspection, retries, backoff, sleep
    )
    if verdict is None:
        final = replace(first, stage=STAGE_B, overridden=False)
    else:
        final = replace(verdict, overridden=True)
    return (final, first) if with_first_stage else final


def _similarity(h: Iterable[float], g: Iterable[float], span: float) -> float:
    h, g = np.asarray(list(h), float), np.asarray(list(g), float)
    return float(np.mean(np.clip(1.0 - np.abs(h - g) / span, 0.0, 1.0)))


def agreement(human: Sequence[ScoreCard], gpt: Sequence[ScoreCard]) -> dict:
    """Mean ``1 - |h - g| / 4`` per dimension; totals use the span of a three-score sum (12)."""
    if len(human) != len(gpt):
        raise LengthMismatch(f"{len(human)} human cards vs {len(gpt)} judge cards")
    if not human:
        raise LengthMismatch("need at least one scored sample")
    span = SCORE_MAX - SCORE_MIN
    out = {d: _similarity((c.scores()[d] for c in human), (c.scores()[d] for c in gpt), span) for d in DIMENSIONS}
    out["total"] = _similarity((c.total for c in human), (c.total for c in gpt), 3 * span)
    return out


def score_batch(
    transport: ChatTransport,
    rubric: Rubric,
    items: Sequence[tuple[str, Image, Image]],
    concurrency: int = 4,
    retries: int = 2,
    out_path: str | os.PathLike | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> list[dict]:
    """Score ``(sample_id, pred, gt)`` items; optionally persist as JSON lines sorted by id."""

    def one(item):
        sid, pred, gt = item
        final, first = run_two_stage(transport, rubric, pred, gt, retries=retries, sleep=sleep, with_first_stage=True)
        return {"id": sid, **final.as_dict(), "evaluator_a": first.as_dict()}

    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        rows = list(pool.map(one, items))
    rows.sort(key=lambda r: r["id"])
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8") as fh:
            for r in rows:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
    return rows


def load_scorecards(path: str | os.PathLike) -> dict[str, ScoreCard]:
    """Cards keyed by sample id from a JSON-lines file written by :func:`score_batch`."""
    cards = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            fields = {k: row[k] for k in (*DIMENSIONS, "total", "reasons", "stage", "overridden") if k in row}
            cards[row["id"]] = ScoreCard(**fields)
    return cards
