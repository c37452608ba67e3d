"""Command line front end: kvss-capture --model <id> --prompt-file <p> ..."""

import click

from .hook import CaptureCapabilityError, CaptureSizeError, CaptureSpec, export_capture


@click.command()
@click.option("--model", required=True, help="checkpoint identifier or path")
@click.option("--prompt-file", required=True, type=click.Path(exists=True))
@click.option("--layers", default="0", show_default=True,
              help="comma-separated decoder layer indices")
@click.option("--max-t", default=512, show_default=True, type=int)
@click.option("--out", required=True, type=click.Path())
def main(model, prompt_file, layers, max_t, out):
    """Export a prefill attention/value capture from a pretrained model."""
    with open(prompt_file) as f:
        prompt = f.read()
    try:
        layer_tuple = tuple(int(x) for x in layers.split(",") if x.strip())
    except ValueError:
        raise click.UsageError(f"bad --layers value: {layers!r}")
    spec = CaptureSpec(model=model, prompt=prompt, layers=layer_tuple,
                       max_t=max_t, out=out)
    try:
        export_capture(spec)
    except (CaptureCapabilityError, CaptureSizeError, ValueError) as e:
        raise click.ClickException(str(e))
    click.echo(out)


if __name__ == "__main__":
    main()
