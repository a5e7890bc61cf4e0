"""eastlab: a desk-scale lab for reward-driven sequence training.

Pure-numpy stack: a tape-based autodiff engine, a prefix-LM transformer,
constrained decoders, a synthetic sectioned-report corpus with a rule-based
entity/relation reward, and trainers for likelihood (teacher-forced) and
self-critical policy-gradient fine-tuning with an optional entropy term.
"""

__version__ = "0.1.0"
