# Subcommand handlers
from app.commands import evaluate, export, sensitivity, simulate, stream, train

COMMANDS = [simulate, train, stream, evaluate, sensitivity, export]
