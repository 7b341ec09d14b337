"""Turn-taking signals, agent actions and streaming inference on dual-channel voice activity."""
from .actions import ACTIONS, ActionConfig, ActionEvent, derive_actions, derive_word_level_classes
from .labels import LabelConfig, SignalLabels, derive_all
from .signals import SIGNAL_NAMES, SignalEstimates
from .synth import GeneratorConfig, generate, generate_corpus
from .timeline import ActivityTimeline, FrameRate, SpeechSegment, duration_to_frames, extract_segments, rasterize_segments

__version__ = "0.1.0"
