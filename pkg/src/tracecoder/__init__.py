"""Knowledge-augmented, traceable multi-label coding of long clinical notes."""

from tracecoder.config import TrainConfig
from tracecoder.corpus import Corpus, Document, LabelSpace, Vocab
from tracecoder.errors import TraceCoderError
from tracecoder.model import Branches, TraceCoder

__all__ = ["Branches", "Corpus", "Document", "LabelSpace", "TraceCoder", "TraceCoderError",
           "TrainConfig", "Vocab"]
__version__ = "0.1.0"
