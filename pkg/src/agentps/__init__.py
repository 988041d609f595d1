__all__ = [
    'ablation',
    'annotator',
    'assembly',
    'checkpoint',
    'cli',
    'client',
    'config',
    'data',
    'dispatch',
    'errors',
    'evaluation',
    'metrics',
    'mock_server',
    'models',
    'network',
    'numerics',
    'optim',
    'templates',
    'training',
]

__version__ = '0.1.0'
