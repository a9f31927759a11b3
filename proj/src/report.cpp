namespace qnmarl {}
