# fringeforge package initializer

"""
fringeforge パッケージの初期化

オフアクシス QPI の位相復元：従来法パイプライン（正解ラベル生成）と、
接続探索で構成したエンコーダ・デコーダ網（super-PRNet → NAS-PRNet）。
"""

__version__ = "0.1.0"
__all__ = [
    'tensor',
    'formats',
    'fft',
    'classical',
    'supernet',
    'losses',
    'optim',
    'nas',
    'harness',
    'config',
    'cli',
    'errors',
]
