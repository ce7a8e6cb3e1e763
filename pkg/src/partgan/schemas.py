"""JSON Schemas for the files the CLI writes."""

_number_or_null = {"type": ["number", "null"]}

MANIFEST = {
    "type": "object",
    "required": ["schema", "mode", "K", "priors", "counts", "workers", "config", "coordinator_s", "max_worker_s"],
    "properties": {
        "schema": {"const": "partgan.manifest/1"},
        "mode": {"enum": ["unified-gan", "conditional-gan", "distributed-cgan"]},
        "K": {"type": "integer", "minimum": 1},
        "priors": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "counts": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "config": {"type": "object"},
        "coordinator_s": {"type": "number", "exclusiveMinimum": 0},
        "max_worker_s": {"type": "number", "exclusiveMinimum": 0},
        "workers": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["class_id", "checkpoint", "seed", "duration_s", "steps"],
                "properties": {
                    "class_id": {"type": ["integer", "null"]},
                    "checkpoint": {"type": "string"},
                    "seed": {"type": "integer", "minimum": 0},
                    "duration_s": {"type": "number", "exclusiveMinimum": 0},
                    "steps": {"type": "integer", "minimum": 0},
                },
            },
        },
    },
}

SCORES = {
    "type": "object",
    "required": ["schema", "metric", "split_scores", "mean", "std", "n_splits", "n_samples", "classifier", "classifier_accuracy", "mode"],
    "properties": {
        "schema": {"const": "partgan.scores/1"},
        "metric": {"const": "inception_score"},
        "split_scores": {"type": "array", "items": {"type": "number", "minimum": 1}},
        "mean": {"type": "number", "minimum": 1},
        "std": {"type": "number", "minimum": 0},
        "n_splits": {"type": "integer", "minimum": 1},
        "n_samples": {"type": "integer", "minimum": 1},
        "classifier": {"type": "string"},
        "classifier_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "mode": {"type": "string"},
        "sampling": {"enum": ["random", "stratified"]},
    },
}

ANOVA = {
    "type": "object",
    "required": ["schema", "f", "infinite", "K", "counts", "observation"],
    "properties": {
        "schema": {"const": "partgan.anova/1"},
        "f": {"type": "array", "items": _number_or_null},
        "infinite": {"type": "array", "items": {"type": "boolean"}},
        "K": {"type": "integer", "minimum": 2},
        "counts": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "observation": {"const": "per-image channel mean"},
    },
}

BENCH = {
    "type": "object",
    "required": ["schema", "rows", "cores", "ratios"],
    "properties": {
        "schema": {"const": "partgan.bench/1"},
        "cores": {"type": "integer", "minimum": 1},
        "ratios": {"type": "object", "additionalProperties": {"type": "number"}},
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["K", "wall_clock_s", "max_worker_s", "cores_used", "oversubscribed"],
            },
        },
    },
}

LOSSES_COLUMNS = ["class_id", "step", "j_d", "j_g", "d_real_mean", "d_fake_mean"]
SCALING_COLUMNS = ["K", "wall_clock_s", "max_worker_s", "cores_used", "oversubscribed"]
RESULTS_COLUMNS = ["run_id", "metric", "mean", "std", "params"]
