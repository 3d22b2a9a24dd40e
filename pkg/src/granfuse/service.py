"""HTTP service wrapping the core package.

Request handlers are plain functions over pydantic models so the CLI can
call them in-process; the FastAPI app is a thin routing layer on top.
Datasets travel inline as JSONL text and checkpoints as base64 text, which
keeps the service stateless with respect to the client's filesystem.
"""

from __future__ import annotations

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import __version__
from .config import ConfigError, TrainConfig, config_from_dict
from .ingest import AspectInstance, DataError, label_counts, load_records
from .metrics import EvalReport
from .model import (
    Model,
    checkpoint_to_b64,
    model_from_b64,
)
from .preprocess import anchor_report
from .synth import dataset_to_jsonl, generate_dataset
from .tensor import grad_check
from .training import NumericError, evaluate_prepared, train_model

GRADCHECK_EPS = 1e-5
GRADCHECK_TOL = 1e-4


# ---------------------------------------------------------------------------
# wire models
# ---------------------------------------------------------------------------


class HealthResponse(BaseModel):
    status: str
    version: str


class SynthRequest(BaseModel):
    count: int = 64
    vocab: int = 50
    seed: int = 0


class SynthResponse(BaseModel):
    jsonl: str
    count: int
    label_counts: dict


class ValidateRequest(BaseModel):
    jsonl: str


class ValidateResponse(BaseModel):
    instances: int
    label_counts: dict
    token_count: int


class ConfigModel(BaseModel):
    """Partial run configuration; unset fields fall back to the defaults."""

    dim: int | None = None
    heads: int | None = None
    kge_dim: int | None = None
    dep_layers: int | None = None
    con_layers: int | None = None
    sem_layers: int | None = None
    blocks: int | None = None
    factor_dim: int | None = None
    channels: list | None = None
    anchor_c: float | None = None
    margin: float | None = None
    lr: float | None = None
    batch_size: int | None = None
    dropout: float | None = None
    beta: float | None = None
    epochs: int | None = None
    seed: int | None = None
    embed_seed: int | None = None

    def resolve(self, base: TrainConfig | None = None) -> TrainConfig:
        values = (base.to_dict() if base is not None else {})
        values.update({k: v for k, v in self.model_dump().items() if v is not None})
        return config_from_dict(values)


class AnchorsRequest(BaseModel):
    jsonl: str
    c: float = 1.0
    config: ConfigModel = Field(default_factory=ConfigModel)
    checkpoint_b64: str | None = None


class AnchorLabels(BaseModel):
    view: str
    index: int
    pos: list
    neg: list


class InstanceAnchors(BaseModel):
    index: int
    tokens: list
    scores: list
    k: int
    anchors: list
    labels: list


class AnchorsResponse(BaseModel):
    instances: list


class EpochModel(BaseModel):
    epoch: int
    train_loss: float
    class_loss: float
    triplet_loss: float
    eval_accuracy: float
    eval_macro_f1: float


class TrainRequest(BaseModel):
    train_jsonl: str
    eval_jsonl: str | None = None
    config: ConfigModel = Field(default_factory=ConfigModel)
    repeats: int = 1


class RepeatResult(BaseModel):
    seed: int
    metrics_log: str
    epochs: list
    best_epoch: int
    best_macro_f1: float
    final_train_accuracy: float
    final_eval_accuracy: float
    final_eval_macro_f1: float


class TrainResponse(BaseModel):
    repeats: list
    mean_eval_accuracy: float
    mean_eval_macro_f1: float
    checkpoint_b64: str  # best state of the best repeat


class ClassScoresModel(BaseModel):
    precision: float
    recall: float
    f1: float
    support: int


class EvalRequest(BaseModel):
    checkpoint_b64: str
    jsonl: str


class EvalResponse(BaseModel):
    accuracy: float
    macro_f1: float
    per_class: dict
    confusion: list
    total: int


class GradcheckRequest(BaseModel):
    config: ConfigModel = Field(default_factory=ConfigModel)
    seed: int = 0


class GradcheckGroup(BaseModel):
    name: str
    max_rel_error: float
    passed: bool
    zero_grad: bool


class GradcheckResponse(BaseModel):
    groups: list
    passed: bool
    eps: float
    tol: float


# ---------------------------------------------------------------------------
# handlers
# ---------------------------------------------------------------------------


def handle_health() -> HealthResponse:
    return HealthResponse(status="ok", version=__version__)


def handle_synth(req: SynthRequest) -> SynthResponse:
    if req.count <= 0 or req.vocab <= 0:
        raise DataError("count and vocab must be positive")
    instances = generate_dataset(req.count, req.vocab, req.seed)
    counts = label_counts(instances)
    return SynthResponse(
        jsonl=dataset_to_jsonl(instances),
        count=len(instances),
        label_counts=dict(counts),
    )


def handle_validate(req: ValidateRequest) -> ValidateResponse:
    instances = load_records(req.jsonl.splitlines())
    return ValidateResponse(
        instances=len(instances),
        label_counts=dict(label_counts(instances)),
        token_count=sum(inst.n for inst in instances),
    )


def handle_anchors(req: AnchorsRequest) -> AnchorsResponse:
    instances = load_records(req.jsonl.splitlines())
    if req.checkpoint_b64 is not None:
        model = model_from_b64(req.checkpoint_b64)
    else:
        model = Model(req.config.resolve())
    out = []
    for idx, inst in enumerate(instances):
        prep = model.prepare(inst)
        a_sem = model.attention_values(prep)
        report = anchor_report(a_sem, prep.graph, req.c)
        out.append(
            InstanceAnchors(
                index=idx,
                tokens=inst.tokens,
                scores=report["scores"],
                k=report["k"],
                anchors=report["anchors"],
                labels=[AnchorLabels(**entry).model_dump() for entry in report["labels"]],
            ).model_dump()
        )
    return AnchorsResponse(instances=out)


def handle_train(req: TrainRequest) -> TrainResponse:
    if req.repeats < 1:
        raise DataError("repeats must be >= 1")
    train_instances = load_records(req.train_jsonl.splitlines())
    if not train_instances:
        raise DataError("training dataset is empty")
    eval_instances = (
        load_records(req.eval_jsonl.splitlines()) if req.eval_jsonl is not None else None
    )
    base = req.config.resolve()
    repeats = []
    best_overall = None
    best_model = None
    for r in range(req.repeats):
        cfg = config_from_dict({**base.to_dict(), "seed": base.seed + r})
        result = train_model(train_instances, cfg, eval_instances)
        last = result.epochs[-1]
        repeats.append(
            RepeatResult(
                seed=cfg.seed,
                metrics_log=result.metrics_log,
                epochs=[EpochModel(**vars(m)).model_dump() for m in result.epochs],
                best_epoch=result.best_epoch,
                best_macro_f1=result.best_macro_f1,
                final_train_accuracy=result.final_train_accuracy,
                final_eval_accuracy=last.eval_accuracy,
                final_eval_macro_f1=last.eval_macro_f1,
            )
        )
        if best_overall is None or result.best_macro_f1 > best_overall:
            best_overall = result.best_macro_f1
            result.model.load_state(result.best_state)
            best_model = result.model
    return TrainResponse(
        repeats=[r.model_dump() for r in repeats],
        mean_eval_accuracy=float(np.mean([r.final_eval_accuracy for r in repeats])),
        mean_eval_macro_f1=float(np.mean([r.final_eval_macro_f1 for r in repeats])),
        checkpoint_b64=checkpoint_to_b64(best_model),
    )


def _report_to_response(report: EvalReport) -> EvalResponse:
    return EvalResponse(
        accuracy=report.accuracy,
        macro_f1=report.macro_f1,
        per_class={
            name: ClassScoresModel(**vars(scores)).model_dump()
            for name, scores in report.per_class.items()
        },
        confusion=report.confusion,
        total=report.total,
    )


def handle_eval(req: EvalRequest) -> EvalResponse:
    model = model_from_b64(req.checkpoint_b64)
    instances = load_records(req.jsonl.splitlines())
    if not instances:
        raise DataError("evaluation dataset is empty")
    preps = [model.prepare(inst) for inst in instances]
    return _report_to_response(evaluate_prepared(model, preps))


def handle_gradcheck(req: GradcheckRequest) -> GradcheckResponse:
    """Finite-difference check of every parameter group on one synthetic instance."""
    cfg = req.config.resolve()
    model = Model(config_from_dict({**cfg.to_dict(), "seed": req.seed}))
    prep = model.prepare(gradcheck_instance(req.seed, cfg.kge_dim))

    def f():
        total, _, _ = model.batch_loss([prep], train=False)
        return total

    param_groups = model.param_groups()
    all_params = [p for params in param_groups.values() for p in params]
    model.zero_grad()
    report = grad_check(f, all_params, eps=GRADCHECK_EPS, tol=GRADCHECK_TOL)
    by_name = {e.name: e for e in report.entries}
    groups = []
    for name, params in param_groups.items():
        entries = [by_name[p.name] for p in params]
        worst = max(e.max_rel_error for e in entries)
        groups.append(
            GradcheckGroup(
                name=name,
                max_rel_error=worst,
                passed=worst < GRADCHECK_TOL,
                zero_grad=all(e.max_analytic_abs == 0.0 for e in entries),
            ).model_dump()
        )
    return GradcheckResponse(
        groups=groups, passed=report.passed, eps=GRADCHECK_EPS, tol=GRADCHECK_TOL
    )


def gradcheck_instance(seed: int, kge_dim: int) -> AspectInstance:
    """Six tokens exercising every channel: aspect noun, dependency-linked
    opinion with an intensifier, a phrase-structured clause, knowledge rows."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6C]))
    tokens = ["the", "screen", "is", "really", "great", "."]
    heads = [2, 3, 0, 5, 2, 3]  # opinion "great" attaches to the aspect "screen"
    tree = (
        "(S (S (C (X (NP (DT the) (NN screen))) (X (VP (VB is)))"
        " (X (ADJP (RB really) (JJ great))) (X (PU (. .))))))"
    )
    kge = [[round(float(x), 4) for x in rng.normal(0.0, 0.4, size=kge_dim)] for _ in tokens]
    return AspectInstance(
        tokens=tokens,
        aspect_span=(1, 2),
        polarity="positive",
        dep_heads=heads,
        con_tree=tree,
        knowledge_vectors=kge,
    )


# ---------------------------------------------------------------------------
# app
# ---------------------------------------------------------------------------


def create_app() -> FastAPI:
    app = FastAPI(title="granfuse", version=__version__)

    @app.exception_handler(DataError)
    async def data_error_handler(request: Request, exc: DataError):
        return JSONResponse(status_code=422, content={"code": "data_error", "detail": str(exc)})

    @app.exception_handler(ConfigError)
    async def config_error_handler(request: Request, exc: ConfigError):
        return JSONResponse(status_code=422, content={"code": "usage_error", "detail": str(exc)})

    @app.exception_handler(NumericError)
    async def numeric_error_handler(request: Request, exc: NumericError):
        return JSONResponse(
            status_code=500, content={"code": "numeric_error", "detail": str(exc)}
        )

    @app.get("/health", response_model=HealthResponse)
    def health():
        return handle_health()

    @app.post("/synth", response_model=SynthResponse)
    def synth(req: SynthRequest):
        return handle_synth(req)

    @app.post("/validate", response_model=ValidateResponse)
    def validate(req: ValidateRequest):
        return handle_validate(req)

    @app.post("/anchors", response_model=AnchorsResponse)
    def anchors(req: AnchorsRequest):
        return handle_anchors(req)

    @app.post("/train", response_model=TrainResponse)
    def train(req: TrainRequest):
        return handle_train(req)

    @app.post("/eval", response_model=EvalResponse)
    def evaluate(req: EvalRequest):
        return handle_eval(req)

    @app.post("/gradcheck", response_model=GradcheckResponse)
    def gradcheck(req: GradcheckRequest):
        return handle_gradcheck(req)

    return app


app = create_app()
