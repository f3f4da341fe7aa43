"""Audio-visual fusion networks for multi-label video classification, in pure numpy."""

from .data import Dataset, SynthConfig, load_dataset, read_records, synth_dataset, synth_generate, write_records
from .metrics import MetricReport, PredictionSet, average_precision, evaluate, f1_micro, gap_at_k
from .models import ARCHITECTURES, ArchSpec, Model, build_model, count_params, forward, list_architectures
from .trainer import TrainConfig, bce_loss, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
