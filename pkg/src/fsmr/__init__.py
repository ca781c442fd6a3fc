"""Feature statistics mixing regularization for GAN discriminators, with a
style-bias probe and a desk-scale training harness."""

__version__ = "0.1.0"

from .core import (ChannelStats, MixPolicy, adain, channel_stats, fsm, mixed_forward,
                   sample_alpha)
from .errors import (ConfigError, DegenerateMetricError, DivergenceError, InvalidInputError,
                     NumericalError, ShapeError)
from .metrics import (DistanceReport, GaussianSummary, content_distance, cosine_distance,
                      frechet_distance, relative_distance, style_distance,
                      summarize_embeddings)
from .networks import (Discriminator, EmbeddingSpec, Generator, disc_forward, embed,
                       gen_forward)
from .regularizers import (bcr_loss, fsmr_loss, onthefly_consistency_loss, r1_penalty,
                           shuffle_references, total_disc_loss)
from .stylizer import Stylizer, pixel_adain_fallback, stylize
