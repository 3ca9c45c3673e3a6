"""JSON schema every run summary is validated against before it is written."""

_num = {"type": "number"}
_opt_num = {"type": ["number", "null"]}
_count = {"type": "integer", "minimum": 0}

SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "seed", "paradigm", "K", "key_granularity", "num_tasks", "accuracy_matrix",
                 "steps", "final", "oracle", "classifiers", "confusion", "pass_counters", "cost_model",
                 "parameter_counts", "config"],
    "properties": {
        "schema_version": {"const": 1},
        "seed": {"type": "integer"},
        "paradigm": {"enum": ["SQSK", "SQMK", "MQSK", "MQMK"]},
        "K": {"type": "integer", "minimum": 1},
        "key_granularity": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "num_tasks": {"type": "integer", "minimum": 1},
        "accuracy_matrix": {"type": "array", "items": {"type": "array", "items": _opt_num}},
        "steps": {
            "type": "array", "minItems": 1,
            "items": {"type": "object", "required": ["task", "A", "F", "matching_rate", "accuracy"],
                      "properties": {"task": {"type": "integer"}, "A": _num, "F": _num,
                                     "matching_rate": _num, "accuracy": _num}},
        },
        "final": {"type": "object", "required": ["A", "F", "matching_rate"],
                  "properties": {"A": _num, "F": _num, "matching_rate": _num}},
        "oracle": {
            "type": "object",
            "required": ["acc_true_selected", "acc_false_selected", "acc_false_forced_true",
                         "acc_all_forced_true", "matching_rate", "natural_accuracy", "n_true_selected",
                         "n_false_selected", "recombined_accuracy"],
            "properties": {"n_true_selected": _count, "n_false_selected": _count},
        },
        "classifiers": {"type": "object", "required": ["FC"],
                        "properties": {"FC": _num, "NCM": _opt_num, "KM": _opt_num}},
        "confusion": {"type": "array", "items": {"type": "array", "items": _count}},
        "pass_counters": {
            "type": "object", "required": ["training", "inference"],
            "properties": {
                "training": {"type": "object", "required": ["batches", "forwards", "backwards",
                                                            "forwards_per_batch", "backwards_per_batch"]},
                "inference": {"type": "object", "required": ["samples", "forward_samples", "forwards_per_sample"]},
            },
        },
        "cost_model": {"type": "object", "required": ["training", "inference"]},
        "parameter_counts": {"type": "object",
                             "required": ["prompt_params", "key_params", "classifier_params", "total"]},
        "config": {"type": "object"},
    },
}
