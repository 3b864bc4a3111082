"""moa_gossip 全体で使う例外クラス。"""

from __future__ import annotations

from typing import Optional


class MoAError(Exception):
    """パッケージ内の例外の基底クラス。"""

    kind = "error"


class ConfigurationError(MoAError, ValueError):
    """設定値やパラメータが不正な場合の例外。`field` に原因の項目名を持つ。"""

    kind = "configuration"

    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


class ProtocolViolation(MoAError):
    """ジョブ状態機械に不正な入力が与えられた場合の例外。"""

    kind = "protocol"


class BackendError(MoAError):
    kind = "backend"


class BackendTimeout(BackendError):
    pass


class BackendConnectionError(BackendError):
    pass


class BackendHTTPError(BackendError):
    def __init__(self, message: str, status_code: Optional[int] = None) -> None:
        super().__init__(message)
        self.status_code = status_code


class BackendDecodeError(BackendError):
    """レスポンスボディが chat-completions 形式として解釈できない場合。"""
