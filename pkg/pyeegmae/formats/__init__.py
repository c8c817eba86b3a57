"""@defgroup formats formats
On-disk formats: recording files, checkpoints and metrics logs.
"""
