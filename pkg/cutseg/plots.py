"""
Static renderings for offline inspection of a run.
"""
import numpy as np


def _pyplot():
    import matplotlib
    matplotlib.use('Agg')
    from matplotlib import pyplot as plt
    return plt


def plot_histogram(histogram, path, peaks=None, threshold=None, title=None):
    '''
    Draws a 256-bin histogram as a bar chart and saves it to `path`.

    Parameters
    ----------
    histogram : Histogram256
    path : str
      output image file (format from the extension)
    peaks : PeakList, optional
      detected peaks, marked with triangles
    threshold : int, optional
      selected threshold, drawn as a vertical line
    title : str, optional
    '''
    plt = _pyplot()
    fig = plt.figure(figsize=(6, 3.5))
    ax = fig.add_subplot(1, 1, 1)
    bins = np.arange(len(histogram.counts))
    ax.bar(bins, histogram.counts, width=1.0, color='0.4')
    if peaks is not None and len(peaks):
        ax.plot(peaks.bins, [p.count for p in peaks], 'v', color='tab:red',
                label='peaks')
    if threshold is not None:
        ax.axvline(threshold, color='tab:blue', linestyle='--',
                   label=f'threshold {threshold}')
    if (peaks is not None and len(peaks)) or threshold is not None:
        ax.legend(loc='upper center')
    ax.set_yscale('symlog')
    ax.set_xlim(-1, 256)
    ax.set_xlabel('intensity (0-255)')
    ax.set_ylabel('pixels')
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_cut_panels(inputs, outputs, path, n=4):
    '''
    One row per slice: input, fence cut, wild cut, reconstruction and the
    reconstruction's histogram.

    Parameters
    ----------
    inputs : list of Slice
    outputs : ForwardOutputs
      network outputs for `inputs`
    path : str
    n : int
      number of rows (first slices)
    '''
    from cutseg.thresholding import compute_histogram

    plt = _pyplot()
    rows = min(n, len(inputs))
    fence = outputs.fence_slices()
    wild = outputs.wild_slices()
    recon = outputs.reconstruction_slices()
    fig, axes = plt.subplots(rows, 5, figsize=(12, 2.4 * rows),
                             squeeze=False)
    titles = ['input', 'fence cut', 'wild cut', 'reconstruction']
    for r in range(rows):
        images = (inputs[r], fence[r], wild[r], recon[r])
        for c, image in enumerate(images):
            ax = axes[r, c]
            ax.imshow(image.pixels, cmap='gray', vmin=0, vmax=1)
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(titles[c])
        ax = axes[r, 4]
        counts = compute_histogram([recon[r]]).counts
        ax.bar(np.arange(len(counts)), counts, width=1.0, color='0.4')
        ax.set_yscale('symlog')
        ax.set_xlim(-1, 256)
        if r == 0:
            ax.set_title('reconstruction histogram')
        axes[r, 0].set_ylabel(f'{inputs[r].subject_id}:{inputs[r].index}')
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
