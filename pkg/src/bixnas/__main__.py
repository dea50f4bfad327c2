from bixnas.cli import run

run()
