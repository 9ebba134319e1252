"""finforge: desk-scale language-model engineering toolkit.

Byte-level Unigram tokenizer with split-and-merge training, a
vocabulary-size heuristic, a compute-budget scaling planner with exact
parameter accounting, an ALiBi decoder-only transformer with hand-derived
gradients, a deterministic training loop with chronicles-style diagnostics,
and a likelihood-based evaluation harness.
"""

__version__ = "0.1.0"
