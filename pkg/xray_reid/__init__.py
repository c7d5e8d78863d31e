# xray_reid/__init__.py
import logging

import click


def create_app(config_name='development'):
    """
    Build the command-line application.

    Args:
        config_name (str): 'development', 'testing' or anything else for production.

    Returns:
        click.Group: the ``xray-reid`` command group with every subcommand registered.
    """
    # Load configuration directly
    if config_name == 'development':
        from .config import DevelopmentConfig as settings
    elif config_name == 'testing':
        from .config import TestingConfig as settings
    else:
        from .config import ProductionConfig as settings

    logging.basicConfig(level=settings.LOG_LEVEL, format=settings.LOG_FORMAT, force=True)

    @click.group(name='xray-reid', context_settings={'help_option_names': ['-h', '--help']})
    @click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=settings.DEFAULT_CONFIG_PATH,
                  show_default=True, help='TOML run configuration.')
    @click.option('--seed', type=int, default=None, help='Override the top-level seed.')
    @click.option('--out', 'out_dir', type=click.Path(file_okay=False), default=settings.OUTPUT_DIR,
                  show_default=True, help='Directory for outputs and default inputs.')
    @click.option('--set', 'overrides', multiple=True, metavar='SECTION.KEY=VALUE',
                  help='Override one config value (repeatable); VALUE is a TOML literal.')
    @click.pass_context
    def app(ctx, config_path, seed, out_dir, overrides):
        """Patient re-identification: synthesize, split, train, evaluate and probe."""
        ctx.ensure_object(dict)
        ctx.obj.update(config_path=config_path, seed=seed, out_dir=out_dir, overrides=overrides, settings=settings)

    # Register commands
    from .cli import configure_commands
    configure_commands(app)

    return app
