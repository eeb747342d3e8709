from .conformer import ConformerBlock, ConformerStack, SelfAttention
from .norm import (
    DynamicSpeakerLayerNorm,
    MixDynamicSpeakerLayerNorm,
    SpeakerCondition,
    batch_shuffle,
    dsln,
    mdsln,
    mix_statistics,
    sample_gamma,
)
from .predictors import ConvGLU, LinguisticEncoder, TextPredictor, VariancePredictor
from .tts import CrossLingualTTS, ModelConfig, length_regulate

__all__ = [
    "ConformerBlock", "ConformerStack", "ConvGLU", "CrossLingualTTS", "DynamicSpeakerLayerNorm",
    "LinguisticEncoder", "MixDynamicSpeakerLayerNorm", "ModelConfig", "SelfAttention", "SpeakerCondition",
    "TextPredictor", "VariancePredictor", "batch_shuffle", "dsln", "length_regulate", "mdsln",
    "mix_statistics", "sample_gamma",
]
