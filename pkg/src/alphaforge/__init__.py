"""alphaforge: interactive formulaic-alpha mining engine.

Subsystems:
    panel    - market panel data (OHLCV/VWAP/sector), forward returns, synthetic generators
    expr     - formulaic-alpha DSL: parser, unit checker, validator, canonical printer
    ops      - batch and streaming evaluation of expressions over panels
    gp       - genetic-programming search over expression trees
    metrics  - IC series, long-short backtest, signal decay, IC histogram
    pool     - accepted-alpha pool: decorrelation, selection, deployment, verification
    alphabot - LLM prompt compiler / response decompiler / knowledge library
    server   - HTTP API, session journal, event stream
    cli      - command-line entry points
"""

__version__ = "0.1.0"
