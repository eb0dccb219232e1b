"""
errors.py - 例外定義モジュール

ライブラリ側は例外を送出するのみ。終了コードへの変換は cli.py が行う。
"""


class FringeForgeError(Exception):
    """fringeforge の全例外の基底"""


class ShapeError(FringeForgeError, ValueError):
    """テンソル・グリッドの形状不一致"""


class ConfigError(FringeForgeError, ValueError):
    """設定ファイル・フラグの不正"""


class ArchitectureError(FringeForgeError, ValueError):
    """アーキテクチャ（辺集合）の不正"""


class CarrierError(FringeForgeError, ValueError):
    """キャリア周波数が復調に使えない"""


class FormatError(FringeForgeError, ValueError):
    """ファイル形式の不正・バージョン不一致"""
