"""degenlab: a desk-scale laboratory for studying and curing text degeneration.

Train a deliberately degenerative expert by keeping only the smallest-loss
tokens of each batch, then train a diversity-enhanced model through a
product-of-experts combination with that frozen expert; score corpora for
degenerative attributes, follow group-wise training dynamics across epoch
checkpoints, and evaluate generations with a standard diversity metric suite.
"""

__version__ = "0.1.0"
