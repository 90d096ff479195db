"""Document-level machine translation with translation-memory retrieval.

Pipeline: ingest a sentence-aligned bilingual corpus, learn a subword
vocabulary, index the training source side with BM25, attach a retrieved
(source, target) pair to every sentence, and train a two-stream encoder /
decoder whose attention heads see the document, adjacent sentences and the
retrieved pairs through sparse masks. A selection layer prunes retrieved
tokens before cross-attention. Decoding is sentence-by-sentence beam search
over the document; evaluation is corpus BLEU.
"""

__version__ = "0.1.0"
