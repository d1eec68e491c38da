"""Client-facing gateway: auth, rate limiting, safety filter, relay, observability."""

from .app import ChatRequest, Gateway, GatewayConfig, create_app
from .auth import ApiKeyRecord, AuthError, DisabledKeyError, KeyStore, MissingHeaderError, UnknownKeyError, hash_key
from .observability import ObservationRecord, ObservationSink, read_observations
from .ratelimit import Decision, TokenBucketLimiter
from .safety import ContentFilter, StreamFilter
