"""Toolkit for specializing language models to simulate group-level survey
response distributions: dataset construction, first-token alignment
training, reference baselines and the evaluation harness."""

__version__ = "0.1.0"

from .survey_data import (DatasetSplits, Entry, ResponseDistribution,  # noqa: F401
                          SurveyQuestion, build_splits, clean_survey,
                          filter_countries, load_aggregated_json,
                          load_respondent_csv, parse_survey,
                          read_dataset_jsonl, strip_invalid_options,
                          write_dataset_jsonl)
from .prompting import (PromptRecord, apply_control_permutation,  # noqa: F401
                        build_prompt, load_templates, shuffle_options)
from .metrics import (argmax_accuracy, diversity_profile, emd, jsd,  # noqa: F401
                      one_minus_jsd)
from .training import (OptionLogits, TrainConfig, TrainingLog,  # noqa: F401
                       ce_loss, index_option_logits, js_loss, kl_loss,
                       softmax_normalize, train, wa_loss)
from .backends import (Backend, BackendDescriptor, MockBackend,  # noqa: F401
                       ToyEmbeddingBackend, ToyTableBackend, make_backend)
from .baselines import (HashingEmbedder, avg_culture_predict,  # noqa: F401
                        json_zs_predict, knn_predict, zero_shot_predict)
from .harness import (EvalResult, OraclePredictor, UniformPredictor,  # noqa: F401
                      ZeroShotPredictor, diversity_report, emit_report,
                      evaluate, pew_generalization, run_matrix)
