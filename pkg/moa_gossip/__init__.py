"""
エッジ端末向け分散 Mixture-of-Agents (MoA) のプロトコルエンジンとシミュレータ。

各モジュールはゴシップ型の提案→集約プロトコル、キュー安定性の解析式、
離散事象シミュレーション、推論バックエンド、CLI を提供する。
"""

__version__ = "0.1.0"
