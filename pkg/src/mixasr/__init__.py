"""mixasr: mixed-domain self-supervised finetuning toolkit for CTC speech recognition.

Library surface:

- :mod:`mixasr.corpus`     manifests, normalization, duration filters, dataset export
- :mod:`mixasr.ngram`      order-n LM counting, Kneser-Ney estimation, ARPA I/O, filtering
- :mod:`mixasr.alignpipe`  long-audio chunking, TF-IDF pairing, local alignment, curation
- :mod:`mixasr.acoustic`   feature encoder, span masking, Gumbel product quantizer, context net
- :mod:`mixasr.objectives` CTC / contrastive / diversity losses and the mixed objective
- :mod:`mixasr.trainer`    schedules, mixed batching, accumulation, early stopping, PSL
- :mod:`mixasr.decoder`    greedy collapse and LM-fused prefix beam search
- :mod:`mixasr.metrics`    corpus WER, relative adaptation improvement, code projection
- :mod:`mixasr.synthetic`  bundled two-domain synthetic task generator
- :mod:`mixasr.cli`        command-line entry points
"""

__version__ = "0.1.0"
