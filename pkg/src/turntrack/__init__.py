"""Online entity tracking for two-party, turn-based conversations.

The package follows one pipeline: a JSONL corpus of annotated conversations
(:mod:`turntrack.corpus`), an entity-reference repository carried across
turns (:mod:`turntrack.repository`), feature rows for repository and
utterance elements (:mod:`turntrack.encoding`), a two-stage transformer
(:mod:`turntrack.network`) trained with a masked hinge loss
(:mod:`turntrack.training`), turn-by-turn decoding
(:mod:`turntrack.inference`) and span-exact scoring
(:mod:`turntrack.evaluation`).  ``turntrack.cli`` exposes all of it as a
command-line tool.
"""

from .corpus import (Conversation, CorpusStats, GoldReference, Turn,
                     augment_names, compute_stats, load_corpus, parse_corpus,
                     save_corpus, serialize_corpus, split_corpus,
                     validate_conversation)
from .encoding import (Encoder, FeatureLayout, HashEmbedding,
                       PretrainedEmbedding, WindowedMeanContextual,
                       load_first_names, load_word_vectors)
from .errors import (CheckpointError, CorpusParseError, CorpusValidationError,
                     EncodingError, GradientError, RepositoryError,
                     SequenceTooLongError, ShapeError, TurntrackError)
from .evaluation import (EndpointMetrics, EvaluationResult,
                         error_propagation_study, evaluate, per_token_report,
                         score_predictions)
from .inference import (OracleModel, PredictedReference, SuppressedStage1,
                        TurnModel, TurnPrediction, track_conversation,
                        track_turn)
from .network import (ModelConfig, TransformerModel, load_checkpoint,
                      save_checkpoint)
from .repository import (EntityReference, Repository, add_references,
                         assign_new_ids, build_gold_repository,
                         randomize_ids, seed_repository)
from .training import TrainConfig, TrainResult, build_example, train

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
