"""LLM-judge protocol: prompt construction, score parsing and an HTTP client.

The judge is asked to rate a predicted description against the ground truth
on an integer 0..5 scale; the mean score is reported as a percentage.
"""
from __future__ import annotations

import logging
import math
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import httpx

from .errors import ConfigError, ContractError
from .metrics import tokenize

log = logging.getLogger(__name__)

MAX_SCORE = 5

# Templates are stored already rendered to plain text; {gt} and {pred} mark
# the two fields that are substituted.
LLAMA_CHAT = (
    "Please evaluate the following movie audio description pair:\n"
    "- Correct Audio Description: {gt}\n"
    "- Predicted Audio Description: {pred}\n"
    "Provide your evaluation only as a matching score where the matching score is an integer value "
    "between 0 and 5, with 5 indicating the highest level of match.\n"
    "Please generate the response in the form of a Python dictionary string with keys 'score', where its "
    "value is the matching score in INTEGER, not STRING.\n"
    "DO NOT PROVIDE ANY OTHER OUTPUT TEXT OR EXPLANATION. Only provide the Python dictionary string. "
    "For example, your response should look like this: {'score': }."
)

GPT_SYSTEM_USER = (
    "System:\n"
    "You are an intelligent chatbot designed for evaluating the quality of generative outputs for movie "
    "audio descriptions. Your task is to compare the predicted audio descriptions and determine its level "
    "of match, considering mainly the visual elements like actions, objects and interactions. Here's how "
    "you can accomplish the task:\n"
    "Instructions:\n"
    "- Check if the predicted audio description covers the main visual elements from the movie, especially "
    "focusing in the verbs and nouns.\n"
    "- Evaluate whether the predicted audio description includes specific details rather than just generic "
    "points. It should provide comprehensive information that is tied to specific elements of the video.\n"
    "- Consider synonyms or paraphrases as valid matches. Consider pronouns like 'he' or 'she' as valid "
    "matches with character names. Consider different character names as valid matches.\n"
    "- Provide a single evaluation score that reflects the level of match of the prediction, considering "
    "the visual elements like actions, objects and interactions.\n"
    "\n"
    "User:\n"
    "Please evaluate the following movie description pair:\n"
    "- Correct Audio Description: {gt}\n"
    "- Predicted Audio Description: {pred}\n"
    "Provide your evaluation only as a matching score where the matching score is an integer value "
    "between 0 and 5, with 5 indicating the highest level of match. "
    "Please generate the response in the form of a Python dictionary string with keys 'score', where its "
    "value is the matching score in INTEGER, not STRING.\n"
    "DO NOT PROVIDE ANY OTHER OUTPUT TEXT OR EXPLANATION. Only provide the Python dictionary string. "
    "For example, your response should look like this: {'score': }."
)

TEMPLATES = {"llama_chat": LLAMA_CHAT, "gpt_system_user": GPT_SYSTEM_USER}
_FIELD = re.compile(r"\{(gt|pred)\}")
_SCORE = re.compile(r"""(['"])score\1\s*:\s*(-?\d+)(?![\d.])""")


@dataclass(frozen=True)
class JudgePrompt:
    template: str
    gt: str
    pred: str
    text: str


def build_judge_prompt(template: str, gt: str, pred: str) -> JudgePrompt:
    """Fill the two fields of a template in one pass.

    Inputs are inserted verbatim; braces or field names inside them are
    never interpreted.
    """
    if template not in TEMPLATES:
        raise ConfigError(f"unknown judge template {template!r}; known: {sorted(TEMPLATES)}")
    if not gt or not pred:
        raise ContractError("ground truth and prediction must be non-empty")
    values = {"gt": gt, "pred": pred}
    text = _FIELD.sub(lambda m: values[m.group(1)], TEMPLATES[template])
    return JudgePrompt(template, gt, pred, text)


@dataclass(frozen=True)
class JudgeScore:
    raw: str
    score: Optional[int]
    valid: bool
    error: str = ""

    @property
    def percent(self) -> Optional[float]:
        return self.score / MAX_SCORE * 100.0 if self.valid else None


def parse_judge_response(text: str) -> JudgeScore:
    """Read the first integer bound to a quoted ``score`` key."""
    m = _SCORE.search(text or "")
    if m is None:
        return JudgeScore(text, None, False, "no integer score found")
    value = int(m.group(2))
    if not 0 <= value <= MAX_SCORE:
        return JudgeScore(text, value, False, f"score {value} outside 0..{MAX_SCORE}")
    return JudgeScore(text, value, True)


def judge_percent(scores: Sequence[JudgeScore]) -> Optional[float]:
    """Mean valid score as a percentage of the maximum; None if nothing is valid."""
    valid = [s.score for s in scores if s.valid]
    if not valid:
        return None
    return sum(valid) / len(valid) / MAX_SCORE * 100.0


def mock_score(gt: str, pred: str) -> int:
    """Offline stand-in judge: token-overlap F1 mapped onto 0..5."""
    g, p = tokenize(gt), tokenize(pred)
    if not g or not p:
        return 0
    common = sum(min(g.count(t), p.count(t)) for t in set(g))
    if common == 0:
        return 0
    precision, recall = common / len(p), common / len(g)
    f1 = 2 * precision * recall / (precision + recall)
    return int(math.floor(MAX_SCORE * f1 + 0.5))


@dataclass
class JudgeConfig:
    url: Optional[str] = None
    model: str = "judge"
    token_env: str = "JUDGE_API_TOKEN"
    retries: int = 3
    backoff: float = 0.5
    timeout: float = 30.0
    max_workers: int = 4
    mock: bool = False


class JudgeClient:
    """Sends prompts as ``{"model", "prompt"}`` JSON and reads ``{"text"}`` back.

    Failed requests are retried with exponential backoff; an item that still
    fails becomes an invalid score carrying the error, and the batch goes on.
    """

    def __init__(
        self,
        config: JudgeConfig,
        transport: Optional[httpx.BaseTransport] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if not config.mock and not config.url:
            raise ConfigError("a judge URL is required unless the mock judge is selected")
        self.config = config
        self._transport = transport
        self._sleep = sleep

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.config.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _ask(self, http: httpx.Client, prompt: JudgePrompt) -> JudgeScore:
        if self.config.mock:
            value = mock_score(prompt.gt, prompt.pred)
            return parse_judge_response(f"{{'score': {value}}}")
        error = ""
        for attempt in range(self.config.retries + 1):
            if attempt:
                self._sleep(self.config.backoff * 2 ** (attempt - 1))
            try:
                resp = http.post(self.config.url, json={"model": self.config.model, "prompt": prompt.text})
                if resp.status_code >= 500 or resp.status_code == 429:
                    error = f"HTTP {resp.status_code}"
                    continue
                resp.raise_for_status()
                return parse_judge_response(str(resp.json().get("text", "")))
            except (httpx.HTTPError, ValueError) as exc:
                # 4xx other than 429 and undecodable bodies are not retried
                if isinstance(exc, httpx.TransportError):
                    error = f"{type(exc).__name__}: {exc}"
                    continue
                return JudgeScore("", None, False, f"{type(exc).__name__}: {exc}")
        log.warning("judge request failed after %d attempts: %s", self.config.retries + 1, error)
        return JudgeScore("", None, False, f"failed after {self.config.retries + 1} attempts: {error}")

    def score(self, prompts: Sequence[JudgePrompt]) -> list[JudgeScore]:
        """Score every prompt, at most ``max_workers`` in flight, in input order."""
        with httpx.Client(transport=self._transport, timeout=self.config.timeout, headers=self._headers()) as http:
            with ThreadPoolExecutor(max_workers=max(1, self.config.max_workers)) as pool:
                return list(pool.map(lambda p: self._ask(http, p), prompts))


def judge_client(prompts: Sequence[JudgePrompt], config: JudgeConfig, **kwargs) -> list[JudgeScore]:
    return JudgeClient(config, **kwargs).score(prompts)
