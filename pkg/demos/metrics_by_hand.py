"""The four detection metrics on small hand-made masks.

IoU and nIoU measure pixel overlap, Pd counts targets whose predicted blob
lands within three pixels, and Fa counts the pixels of predicted blobs that
match nothing.
"""
import numpy as np

from dhif import evaluate


def show(title, pred, gt):
    rep = evaluate([pred], [gt])
    print(title)
    for p_row, g_row in zip(pred, gt):
        print("   pred " + "".join(".#"[v] for v in p_row) + "    truth " + "".join(".#"[v] for v in g_row))
    print(f"   iou {rep.iou:.4f}  niou {rep.niou:.4f}  pd {rep.pd:.2f}  fa {rep.fa:.4f}\n")


def main():
    gt = np.zeros((4, 4), np.uint8)
    gt[0:2, 0:2] = 1
    pred = np.zeros((4, 4), np.uint8)
    pred[0:2, 1:3] = 1
    show("shifted by one column: 2 shared of 6 covered pixels", pred, gt)

    pred[3, 3] = 1
    show("plus one isolated false pixel: 1 of 16 pixels is a false alarm", pred, gt)

    gt2 = np.zeros((8, 8), np.uint8)
    gt2[1, 1] = gt2[6, 6] = 1
    pred2 = np.zeros((8, 8), np.uint8)
    pred2[2, 2] = 1
    show("two point targets, one found nearby (distance 1.41): pd 0.5", pred2, gt2)


if __name__ == "__main__":
    main()
