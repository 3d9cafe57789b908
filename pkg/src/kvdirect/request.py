from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Request:
    request_id: int
    prompt_tokens: int
    response_tokens: int
    arrival_ns: int = 0

    def __post_init__(self) -> None:
        if self.request_id <= 0:
            raise ValueError("request ids start at 1")
        if self.prompt_tokens < 1 or self.response_tokens < 1:
            raise ValueError("prompt and response need at least one token")
