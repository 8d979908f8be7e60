"""Speech-driven 3D facial animation with a discrete motion prior.

Stage one learns a vector-quantized codebook of facial motion primitives by
self-reconstruction; stage two trains a speech-conditioned autoregressive
transformer that queries the frozen codebook to synthesize motion sequences.
"""

from .data import (AudioClip, Corpus, CorpusItem, CorpusSplits, FaceRig,
                   FormatError, MotionSequence, SynthesisConfig,
                   animate_template, build_face_rig, generate_synthetic_corpus,
                   load_audio, load_corpus, load_rig, load_sequence,
                   save_audio, save_corpus, save_rig, save_sequence,
                   split_corpus)
from .metrics import (EvalReport, dyn, evaluate_pair, fdd, lip_distance_curve,
                      lip_vertex_error, motion_dynamics_stats)
from .prior import (CheckpointError, PriorConfig, PriorModel, TrainingDiverged,
                    codebook_stats, frozen_prior_hash, instance_norm,
                    load_prior, quantize, reconstruction_error, save_prior,
                    straight_through, train_prior, vq_loss)
from .speech import (SpeechEncoder, SpeechEncoderConfig, align_features,
                     conv_output_length, receptive_field)
from .synth import (SynthConfig, SynthModel, ce_token_loss, interpolate_style,
                    load_synth, save_synth, synth_loss, synthesize,
                    train_synth, unit_style)

__version__ = "0.1.0"
