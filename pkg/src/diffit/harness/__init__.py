"""Experiment plumbing: toy datasets, training, metrics, FLOP accounting,
attention dumps and the command line."""

from .attn import AttnTrace, attn_dump, collect_attention
from .config import DatasetConfig, OptimizerConfig, RunConfig
from .datasets import KINDS, ToyDataset, make_dataset
from .flops import attention_logit_macs, flops
from .metrics import MetricReport, energy_distance, metrics
from .train import TrainingAborted, TrainResult, train, train_network
