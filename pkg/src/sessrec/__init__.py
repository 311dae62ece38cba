"""Session-based next-item recommendation with small transformer encoders.

The package covers the whole path from raw interaction logs to ranked
recommendations: loading or synthesizing data (``ingest``), encoding it
(``preprocess``), a numpy reverse-mode autodiff engine (``autodiff``), the
model and its training loops (``model``, ``training``), ranking metrics
(``evaluation``), score-sum ensembling (``ensemble``), breakdown tables
(``analysis``) and the end-to-end runs behind the ``sessrec`` command.
"""

__version__ = "0.1.0"
