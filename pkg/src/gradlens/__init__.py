"""gradlens: a desk-scale laboratory for gradient inversion attacks on
federated transformer fine-tuning.

Subpackages follow the pipeline: `data` (corpora and tokenization), `model`
(toy transformer with exact analytic gradients), `fedsim` (federated rounds,
gradient capture, defenses), `attack_token` (subspace-guided embedding
recovery and label recovery), `attack_order` (sequence order calibration),
`metrics` (ROUGE evaluation), and `cli` (orchestration).
"""

__version__ = "0.1.0"
