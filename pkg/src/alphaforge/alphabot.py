"""Human-AI mediator: compiles trading ideas into prompts, decompiles LLM
responses into validated alpha expressions, and manages the exemplar library.

Providers sit behind one contract; the bundled mocks (fixture replay and
keyword-template) are deterministic so the whole pipeline runs offline.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field

import numpy as np

from . import expr as ex
from .expr import ValidationReport, canonical, parse

EMBED_DIM = 1536


class AlphabotError(Exception):
    pass


class BudgetTooSmall(AlphabotError):
    pass


class CannotFit(AlphabotError):
    pass


class ProviderError(AlphabotError):
    pass


class NoValidAlphas(AlphabotError):
    pass


class EmbeddingDimMismatch(AlphabotError):
    pass


SYSTEM_PREAMBLE = (
    "You are a quant researcher developing formulaic alphas over daily "
    "volume-price stock data. Express every alpha strictly in the provided "
    "operator language over the fields open, high, low, close, volume, vwap."
)

FEATURE_DOCS = {
    "open": "daily opening price of stocks",
    "high": "highest intraday price of stocks",
    "low": "lowest intraday price of stocks",
    "close": "daily closing price of stocks",
    "volume": "daily traded share volume of stocks",
    "vwap": "volume-weighted average price of stocks",
}

OPERATOR_DOCS = {
    "add": "'x + y': element-wise sum (units must match)",
    "sub": "'x - y': element-wise difference (units must match)",
    "mul": "'x * y': element-wise product",
    "div": "'x / y': element-wise ratio (division by zero is masked)",
    "neg": "'-x': element-wise negation",
    "abs": "'abs(x)': element-wise absolute value",
    "log": "'log(x)': natural logarithm, x must be positive",
    "sqrt": "'sqrt(x)': square root, x must be non-negative",
    "ts_delay": "'ts_delay(x, w)': value of x at the start of the trailing w-day window",
    "ts_delta": "'ts_delta(x, w)': change of x over the trailing w-day window",
    "ts_mean": "'ts_mean(x, w)': mean of x over the trailing w days",
    "ts_std": "'ts_std(x, w)': standard deviation of x over the trailing w days",
    "ts_min": "'ts_min(x, w)': minimum of x over the trailing w days",
    "ts_max": "'ts_max(x, w)': maximum of x over the trailing w days",
    "ts_rank": "'ts_rank(x, w)': rank of today's x within its trailing w-day window, in [0,1]",
    "ts_corr": "'ts_corr(x, y, w)': rolling Pearson correlation of x and y over w days",
    "cs_rank": "'cs_rank(x)': cross-sectional rank across instruments, in [0,1]",
    "cs_scale": "'cs_scale(x)': cross-sectional z-score across instruments",
    "group_neutralize": "'group_neutralize(x)': x minus its sector mean, per day",
}

FORMAT_INSTRUCTION = (
    "Output each alpha as a block of exactly three lines:\n"
    "Name: <short identifier>\n"
    "Expression: <formula in the operator language>\n"
    "Description: <one paragraph in natural language>\n"
    "Separate blocks with a blank line."
)


def operator_doc_block() -> str:
    lines = ["Available data fields:"]
    lines += [f"  '{k}': {v}" for k, v in FEATURE_DOCS.items()]
    lines.append("Available operators:")
    lines += [f"  {v}" for v in OPERATOR_DOCS.values()]
    return "\n".join(lines)


# -- tokens ----------------------------------------------------------------


def estimate_tokens(text: str, provider=None) -> int:
    """ceil(bytes/4) heuristic; providers may override."""
    if provider is not None and hasattr(provider, "estimate_tokens"):
        return provider.estimate_tokens(text)
    return math.ceil(len(text.encode()) / 4)


def _messages_tokens(messages: list[dict], provider=None) -> int:
    return sum(estimate_tokens(m["content"], provider) for m in messages)


ELISION_MARKER = "[earlier context elided]"


def truncate_history(history: list[dict], budget: int, provider=None) -> list[dict]:
    """Drop whole messages oldest-first until the estimate fits the budget.

    The system preamble (if present) and the latest user message are never
    dropped; a one-line marker records that something was elided.
    """
    if _messages_tokens(history, provider) <= budget:
        return list(history)
    protected_head = [m for m in history[:1] if m["role"] == "system"]
    rest = history[len(protected_head):]
    last_user_idx = max((i for i, m in enumerate(rest) if m["role"] == "user"),
                       default=None)
    must_keep = {last_user_idx} if last_user_idx is not None else set()
    marker = {"role": "system", "content": ELISION_MARKER}
    floor = protected_head + [marker] + [rest[i] for i in sorted(must_keep)]
    if _messages_tokens(floor, provider) > budget:
        raise CannotFit("latest user message alone exceeds the budget")
    dropped = set()
    for i in range(len(rest)):
        kept = protected_head + [marker] + [
            m for j, m in enumerate(rest) if j not in dropped or j in must_keep]
        if _messages_tokens(kept, provider) <= budget:
            return kept
        if i not in must_keep:
            dropped.add(i)
    return protected_head + [marker] + [rest[i] for i in sorted(must_keep)]


# -- knowledge library -----------------------------------------------------


@dataclass
class Document:
    id: str
    text: str
    explanation: str = ""
    embedding: list[float] | None = None

    def to_json(self) -> dict:
        return {"id": self.id, "text": self.text,
                "explanation": self.explanation, "embedding": self.embedding}


class BagOfBytesEmbedder:
    """Deterministic mock embedder: normalized byte-histogram in EMBED_DIM."""

    dim = EMBED_DIM

    def embed(self, text: str) -> list[float]:
        v = np.zeros(self.dim)
        for b in text.encode():
            v[b % self.dim] += 1.0
        n = np.linalg.norm(v)
        if n > 0:
            v /= n
        return v.tolist()


class KnowledgeLibrary:
    def __init__(self, documents: list[Document] | None = None):
        self.documents = documents or []
        if self.documents:
            dims = {len(d.embedding) for d in self.documents if d.embedding is not None}
            if len(dims) > 1:
                raise EmbeddingDimMismatch(str(dims))

    def add(self, doc: Document) -> None:
        dims = {len(d.embedding) for d in self.documents if d.embedding is not None}
        if doc.embedding is not None and dims and len(doc.embedding) not in dims:
            raise EmbeddingDimMismatch(f"{len(doc.embedding)} vs {dims}")
        self.documents.append(doc)

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            for d in self.documents:
                f.write(json.dumps(d.to_json()) + "\n")

    @classmethod
    def load(cls, path: str) -> "KnowledgeLibrary":
        docs = []
        with open(path) as f:
            for line in f:
                if line.strip():
                    docs.append(Document(**json.loads(line)))
        return cls(docs)

    def retrieve(self, query: str, k: int, embedder=None) -> list[Document]:
        """Top-k by cosine similarity when embeddings exist, else by lexical
        token overlap; ties broken by document id."""
        if k <= 0 or not self.documents:
            return []
        embedded = [d for d in self.documents if d.embedding is not None]
        if embedded and embedder is not None:
            q = np.asarray(embedder.embed(query))
            if any(len(d.embedding) != q.size for d in embedded):
                raise EmbeddingDimMismatch("query dim differs from library")
            scored = []
            for d in embedded:
                v = np.asarray(d.embedding)
                den = np.linalg.norm(q) * np.linalg.norm(v)
                scored.append((float(q @ v / den) if den > 0 else 0.0, d))
        else:
            q_tokens = set(query.lower().split())
            scored = []
            for d in self.documents:
                shared = q_tokens & set((d.text + " " + d.explanation).lower().split())
                score = len(shared) / len(q_tokens) if q_tokens else 0.0
                scored.append((score, d))
        scored.sort(key=lambda t: (-t[0], t[1].id))
        return [d for _, d in scored[:k]]


# -- prompt compilation ----------------------------------------------------


@dataclass
class PromptBundle:
    system: str
    operator_docs: str
    exemplars: list[Document]
    history: list[dict]
    idea: str
    format_instruction: str
    token_estimate: int

    def to_messages(self) -> list[dict]:
        parts = [self.operator_docs]
        if self.exemplars:
            parts.append("Relevant examples from the knowledge library:")
            for d in self.exemplars:
                parts.append(f"- {d.text}" + (f" ({d.explanation})" if d.explanation else ""))
        parts.append(self.format_instruction)
        parts.append(f"Trading idea: {self.idea}")
        return ([{"role": "system", "content": self.system}]
                + list(self.history)
                + [{"role": "user", "content": "\n\n".join(parts)}])


def compile_prompt(idea: str, library: KnowledgeLibrary | None,
                   history: list[dict], budget: int, k: int = 3,
                   embedder=None, provider=None) -> PromptBundle:
    """Assemble persona + operator docs + retrieved exemplars + truncated
    history + the idea + the output format, within the token budget."""
    if not idea.strip():
        raise AlphabotError("idea must be non-empty")
    if budget < 1024:
        raise AlphabotError("budget must be >= 1024 tokens")
    exemplars = library.retrieve(idea, k, embedder) if library is not None else []
    fixed = [{"role": "system", "content": SYSTEM_PREAMBLE},
             {"role": "user", "content": operator_doc_block() + FORMAT_INSTRUCTION + idea}]
    fixed_tokens = _messages_tokens(fixed, provider)
    if fixed_tokens > budget:
        raise BudgetTooSmall(f"{fixed_tokens} > {budget}")
    hist = list(history)
    bundle = PromptBundle(system=SYSTEM_PREAMBLE, operator_docs=operator_doc_block(),
                          exemplars=exemplars, history=hist, idea=idea,
                          format_instruction=FORMAT_INSTRUCTION, token_estimate=0)
    est = _messages_tokens(bundle.to_messages(), provider)
    if est > budget and exemplars:
        bundle.exemplars = []
        est = _messages_tokens(bundle.to_messages(), provider)
    if est > budget:
        head_budget = budget - (est - _messages_tokens(hist, provider))
        bundle.history = truncate_history(hist, max(head_budget, 0), provider) if hist else []
        est = _messages_tokens(bundle.to_messages(), provider)
    if est > budget:
        raise BudgetTooSmall(f"{est} > {budget}")
    bundle.token_estimate = est
    return bundle


# -- response decompiler ---------------------------------------------------


@dataclass
class AlphaBlock:
    name: str
    expression: str
    description: str = ""
    validation: ValidationReport | None = None


_BLOCK_RE = re.compile(
    r"Name:[ \t]*(?P<name>[^\n]+)\s*\n"
    r"\s*Expression:[ \t]*(?P<expr>[^\n]+)\s*\n"
    r"(?:\s*Description:[ \t]*(?P<desc>[^\n]*))?",
    re.IGNORECASE)


def parse_blocks(text: str, return_skipped: bool = False):
    """Extract Name/Expression/Description blocks, tolerant of code fences,
    numbered headings, and surrounding prose. Malformed fragments (a Name with
    no Expression) are skipped and counted."""
    cleaned = re.sub(r"```[a-zA-Z]*", "", text)
    blocks: list[AlphaBlock] = []
    seen_names: set[str] = set()
    matched_spans = []
    for m in _BLOCK_RE.finditer(cleaned):
        name = m.group("name").strip()
        if name in seen_names:
            name = f"{name}_{len(blocks)}"
        seen_names.add(name)
        blocks.append(AlphaBlock(name=name, expression=m.group("expr").strip(),
                                 description=(m.group("desc") or "").strip()))
        matched_spans.append(m.span())
    n_name_lines = len(re.findall(r"^\s*(?:\d+[.)]\s*)?Name:", cleaned,
                                  re.MULTILINE | re.IGNORECASE))
    skipped = max(0, n_name_lines - len(blocks))
    if return_skipped:
        return blocks, skipped
    return blocks


# -- providers -------------------------------------------------------------


class LLMProvider:
    name = "base"
    deterministic = False

    def complete(self, messages: list[dict], max_output_tokens: int = 1024) -> str:
        raise NotImplementedError


class FixtureProvider(LLMProvider):
    """Replays recorded response texts in order (one per provider call)."""

    deterministic = True

    def __init__(self, responses: list[str], repeat_last: bool = False,
                 name: str = "mock-fixture"):
        self.responses = list(responses)
        self.repeat_last = repeat_last
        self.calls = 0
        self.name = name

    @classmethod
    def from_dir(cls, path: str, repeat_last: bool = False) -> "FixtureProvider":
        import os
        files = sorted(f for f in os.listdir(path) if f.endswith(".txt"))
        texts = []
        for fn in files:
            with open(f"{path}/{fn}") as f:
                texts.append(f.read())
        return cls(texts, repeat_last=repeat_last)

    def complete(self, messages, max_output_tokens: int = 1024) -> str:
        if self.calls >= len(self.responses):
            if self.repeat_last and self.responses:
                self.calls += 1
                return self.responses[-1]
            raise ProviderError("fixture exhausted")
        out = self.responses[self.calls]
        self.calls += 1
        return out


_TEMPLATE_RULES = [
    ("golden cross", [
        ("gc_divergence", "ts_mean(close,5) - ts_mean(close,20)",
         "Divergence between the fast and slow moving averages; positive when "
         "the fast curve crosses above the slow curve."),
        ("gc_rank", "cs_rank(ts_mean(close,5) - ts_mean(close,20))",
         "Cross-sectional rank of the moving-average divergence."),
    ]),
    ("bollinger", [
        ("boll_breakout",
         "((close - (ts_mean(close,20) + 2*ts_std(close,20))) + abs(close - (ts_mean(close,20) + 2*ts_std(close,20)))) / (2*abs(close - (ts_mean(close,20) + 2*ts_std(close,20))))",
         "Binary breakout signal: 1 when close crosses above the upper "
         "Bollinger band, 0 otherwise (masked exactly on the band)."),
    ]),
    ("bullish", [
        ("three_bulls",
         "(ts_delta(close,2)/abs(ts_delta(close,2))) + ts_delay(ts_delta(close,2)/abs(ts_delta(close,2)),2) + ts_delay(ts_delta(close,2)/abs(ts_delta(close,2)),3)",
         "Sum of the last three daily movement signs; equals 3 after three "
         "consecutive bullish closes."),
    ]),
    ("imbalance", [
        ("ls_imbalance", "(close - vwap) / (high - low + 0.001)",
         "Close relative to the volume-weighted price, scaled by intraday "
         "range: a proxy for long-short pressure imbalance."),
        ("ls_imbalance_rank", "cs_rank((high + low - 2*vwap) / (high - low + 0.001))",
         "Rank of where the volume-weighted price sits inside the day's range."),
    ]),
    ("volume", [
        ("pv_corr", "ts_corr(close, volume, 10)",
         "Ten-day price-volume correlation."),
    ]),
]

_TEMPLATE_DEFAULT = [
    ("momentum_5", "cs_rank(ts_delta(close,5))",
     "Rank of the five-day price change: cross-sectional momentum."),
    ("reversal_intraday", "-((close - open) / ((high - low) + 0.001))",
     "Intraday gain scaled by range, negated for mean reversion."),
    ("pv_corr_10", "ts_corr(close, volume, 10)",
     "Ten-day correlation between price and volume."),
]


def render_explanation(e: ex.Expr) -> str:
    """Deterministic operator-by-operator English rendering of an expression."""
    if isinstance(e, ex.Const):
        return f"the constant {e.value:g}"
    if isinstance(e, ex.Feature):
        return f"the {FEATURE_DOCS[e.name]}"
    if isinstance(e, ex.Unary):
        inner = render_explanation(e.child)
        return {"neg": f"the negation of {inner}",
                "abs": f"the absolute value of {inner}",
                "log": f"the logarithm of {inner}",
                "sqrt": f"the square root of {inner}"}[e.op]
    if isinstance(e, ex.Binary):
        l, r = render_explanation(e.left), render_explanation(e.right)
        word = {"add": "plus", "sub": "minus", "mul": "times", "div": "divided by"}[e.op]
        return f"({l} {word} {r})"
    if isinstance(e, ex.TsOp):
        inner = render_explanation(e.child)
        if e.op == "ts_corr":
            return (f"the {e.window}-day rolling correlation between {inner} and "
                    f"{render_explanation(e.child2)}")
        noun = {"ts_delay": "lagged value", "ts_delta": "change", "ts_mean": "mean",
                "ts_std": "volatility", "ts_min": "minimum", "ts_max": "maximum",
                "ts_rank": "time-series rank"}[e.op]
        return f"the {e.window}-day {noun} of {inner}"
    if isinstance(e, ex.CsOp):
        noun = "rank" if e.op == "cs_rank" else "z-score"
        return f"the cross-sectional {noun} of {render_explanation(e.child)}"
    return f"the sector-neutralized value of {render_explanation(e.child)}"


class TemplateProvider(LLMProvider):
    """Deterministic keyword -> template mock; answers both alpha-generation
    and explanation prompts with rule-based text."""

    deterministic = True
    name = "mock-template"

    def complete(self, messages, max_output_tokens: int = 1024) -> str:
        last_user = next((m["content"] for m in reversed(messages)
                          if m["role"] == "user"), "")
        m = re.search(r"EXPLAIN-EXPRESSION:\s*(?P<e>[^\n]+)", last_user)
        if m:
            try:
                e = parse(m.group("e").strip())
            except ex.ExprError:
                return "The expression could not be interpreted."
            return f"This alpha computes {render_explanation(e)}."
        idea_m = re.search(r"Trading idea:\s*(?P<idea>.+)", last_user, re.DOTALL)
        text = (idea_m.group("idea") if idea_m else last_user).lower()
        picked = []
        for keyword, blocks in _TEMPLATE_RULES:
            if keyword in text:
                picked.extend(blocks)
        if not picked:
            picked = _TEMPLATE_DEFAULT
        out = []
        for name, formula, desc in picked:
            out.append(f"Name: {name}\nExpression: {formula}\nDescription: {desc}")
        return "\n\n".join(out)


class HttpProvider(LLMProvider):
    """Posts role-tagged messages to a chat-completion endpoint.

    Never exercised by tests; configuration-gated via environment variables.
    """

    deterministic = False
    name = "http"

    def __init__(self, endpoint: str, api_key: str = "", model: str = "",
                 reply_path: str = "choices.0.message.content", timeout: float = 60.0):
        self.endpoint = endpoint
        self.api_key = api_key
        self.model = model
        self.reply_path = reply_path
        self.timeout = timeout

    def complete(self, messages, max_output_tokens: int = 1024) -> str:
        import httpx
        payload: dict = {"messages": messages, "max_tokens": max_output_tokens}
        if self.model:
            payload["model"] = self.model
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            resp = httpx.post(self.endpoint, json=payload, headers=headers,
                              timeout=self.timeout)
            resp.raise_for_status()
            data = resp.json()
        except Exception as exc:
            raise ProviderError(str(exc)) from exc
        node = data
        for part in self.reply_path.split("."):
            node = node[int(part)] if part.isdigit() else node[part]
        return str(node)


def make_provider(kind: str, **kwargs) -> LLMProvider:
    if kind == "mock-template":
        return TemplateProvider()
    if kind == "mock-fixture":
        return FixtureProvider.from_dir(kwargs["fixture_dir"],
                                        kwargs.get("repeat_last", False))
    if kind == "http":
        return HttpProvider(**kwargs)
    raise AlphabotError(f"unknown provider {kind!r}")


# -- mining loop -----------------------------------------------------------


@dataclass
class MineConfig:
    batch: int = 10
    max_rounds: int = 3
    budget: int = 8192
    retrieve_k: int = 3


def mine_seed_alphas(idea: str, provider: LLMProvider,
                     library: KnowledgeLibrary | None, panel_mock,
                     config: MineConfig | None = None,
                     embedder=None) -> tuple[list[AlphaBlock], list[dict]]:
    """Iterative generate -> validate -> correct loop.

    Each round compiles a prompt, parses the reply into blocks, validates
    every expression (syntax, units, semantics on the mock panel), keeps the
    valid ones (deduplicated by canonical text), and asks the provider to
    regenerate only the failed blocks. Raises NoValidAlphas when max_rounds
    passes produce nothing valid.
    """
    cfg = config or MineConfig()
    transcript: list[dict] = []
    history: list[dict] = []
    valid: list[AlphaBlock] = []
    seen_canon: set[str] = set()
    request = idea
    for round_no in range(cfg.max_rounds):
        bundle = compile_prompt(request, library, history, cfg.budget,
                                cfg.retrieve_k, embedder, provider)
        messages = bundle.to_messages()
        transcript.append(messages[-1])
        reply = provider.complete(messages, max_output_tokens=2048)
        transcript.append({"role": "assistant", "content": reply})
        history = truncate_history(
            history + [messages[-1], {"role": "assistant", "content": reply}],
            cfg.budget // 2, provider)
        failures: list[tuple[AlphaBlock, ValidationReport]] = []
        for block in parse_blocks(reply):
            report = ex.validate(block.expression, panel_mock)
            block.validation = report
            if report.ok:
                canon = canonical(parse(block.expression))
                if canon not in seen_canon:
                    seen_canon.add(canon)
                    valid.append(block)
            else:
                failures.append((block, report))
        if not failures and valid:
            break
        if round_no == cfg.max_rounds - 1:
            break
        if failures:
            lines = ["These alphas failed validation; regenerate only these, "
                     "keeping the same names:"]
            for block, report in failures:
                reasons = "; ".join(msg for _, _, msg in report.failures) or "invalid"
                lines.append(f"- {block.name}: {block.expression!r} -> {reasons}")
            request = "\n".join(lines)
        else:
            request = ("No alpha blocks were found in your reply. "
                       "Answer again using the required block format.\n"
                       f"Trading idea: {idea}")
    if not valid:
        raise NoValidAlphas(f"no valid alphas after {cfg.max_rounds} round(s)")
    return valid, transcript


def explain(e: ex.Expr, performance, provider: LLMProvider) -> str:
    """Natural-language explanation of an alpha and its measured performance."""
    perf = ""
    if performance is not None:
        perf = (f"\nMeasured performance: mean IC {performance.mean_ic:.4f} "
                f"over {performance.n_days} days.")
    prompt = (f"{operator_doc_block()}\n\n"
              f"EXPLAIN-EXPRESSION: {canonical(e)}{perf}\n"
              "Explain what this alpha measures in plain language.")
    messages = [{"role": "system", "content": SYSTEM_PREAMBLE},
                {"role": "user", "content": prompt}]
    text = provider.complete(messages, max_output_tokens=512)
    if not text.strip():
        raise ProviderError("empty explanation")
    return text
